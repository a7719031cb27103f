//! Verifiable reward, expert-region reject sampling and the annealed bonus.

use log::warn;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{IcpoError, Result};
use crate::rng::{derive_seed, rng_from, stream};
use crate::rollout::{RolloutGroup, Trajectory};
use crate::task::{verify, TaskInstance, Vocab};

/// Acceptance comparison against `delta`. Only `>=` is supported: with
/// binary rewards and `delta = 1` a strict comparison accepts nothing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptRule {
    #[default]
    Geq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapingConfig {
    pub delta: f64,
    pub alpha: f64,
    pub total_steps: u64,
    pub rs_enabled: bool,
    #[serde(default)]
    pub accept_rule: AcceptRule,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        Self {
            delta: 1.0,
            alpha: 1.0,
            total_steps: 400,
            rs_enabled: true,
            accept_rule: AcceptRule::Geq,
        }
    }
}

impl ShapingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(IcpoError::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(IcpoError::Config(format!(
                "delta must lie in (0, 1], got {}",
                self.delta
            )));
        }
        if self.total_steps < 1 {
            return Err(IcpoError::Config("total_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// 1 for a verified answer, 0 otherwise.
pub fn verifiable_reward(task: &TaskInstance, traj: &Trajectory, vocab: &Vocab) -> f64 {
    if verify(task, &traj.generated, vocab) {
        1.0
    } else {
        0.0
    }
}

/// Reward threshold and correctness must both hold.
pub fn expert_region_accept(
    traj: &Trajectory,
    task: &TaskInstance,
    vocab: &Vocab,
    cfg: &ShapingConfig,
) -> bool {
    let above = match cfg.accept_rule {
        AcceptRule::Geq => traj.raw_reward >= cfg.delta,
    };
    above && verify(task, &traj.generated, vocab)
}

/// Linear decay weight `1 - step/T`, clamped at 0. The flag reports a clamp.
pub fn anneal_weight(step: u64, total_steps: u64) -> (f64, bool) {
    if step > total_steps {
        (0.0, true)
    } else {
        (1.0 - step as f64 / total_steps as f64, false)
    }
}

/// `raw + alpha * (1 - step/T)`.
pub fn annealed_bonus(raw: f64, step: u64, cfg: &ShapingConfig) -> f64 {
    let (g, clamped) = anneal_weight(step, cfg.total_steps);
    if clamped {
        warn!(
            "annealing step {step} beyond T = {}; bonus clamped to 0",
            cfg.total_steps
        );
    }
    raw + cfg.alpha * g
}

/// What happened to a group's candidate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixOutcome {
    pub accepted: bool,
    /// `shaped - raw` for the accepted trajectory.
    pub bonus: f64,
    pub clamped: bool,
}

/// Swaps an accepted expert-conditioned candidate into a uniformly chosen
/// on-policy slot. A rejected candidate leaves the trajectories untouched.
/// Either way the candidate is consumed: accepted ones move into the group,
/// rejected ones stay attached for the rollout dump.
pub fn mix_ief_into_group(
    group: &mut RolloutGroup,
    task_vocab: &Vocab,
    step: u64,
    cfg: &ShapingConfig,
    rng_seed: u64,
) -> MixOutcome {
    let none = MixOutcome {
        accepted: false,
        bonus: 0.0,
        clamped: false,
    };
    let Some(cand) = group.ief_candidate.as_ref() else {
        return none;
    };
    if !expert_region_accept(cand, &group.task, task_vocab, cfg) {
        return none;
    }
    let mut cand = group.ief_candidate.take().expect("checked above");
    let (g, clamped) = anneal_weight(step, cfg.total_steps);
    cand.shaped_reward = if cfg.rs_enabled {
        cand.raw_reward + cfg.alpha * g
    } else {
        cand.raw_reward
    };
    let bonus = cand.shaped_reward - cand.raw_reward;
    let slots: Vec<usize> = group
        .trajectories
        .iter()
        .enumerate()
        .filter(|(_, t)| !t.mode.is_ief())
        .map(|(i, _)| i)
        .collect();
    let mut rng = rng_from(derive_seed(rng_seed, &[stream::REPLACE]));
    let j = slots[rng.gen_range(0..slots.len())];
    let old = std::mem::replace(&mut group.trajectories[j], cand);
    group.displaced = Some(old);
    group.n_on -= 1;
    group.n_off += 1;
    group.stats = None;
    MixOutcome {
        accepted: true,
        bonus,
        clamped: clamped && cfg.rs_enabled,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::ConditioningMode;
    use crate::task::Demonstration;

    fn vocab() -> Vocab {
        Vocab::new(32).unwrap()
    }

    fn task() -> TaskInstance {
        TaskInstance {
            rule_id: 0,
            query: vec![3, 1, 4, 2],
            gold_answer: vec![2, 4, 1, 3],
        }
    }

    fn traj(generated: Vec<usize>, ief: bool) -> Trajectory {
        let mode = if ief {
            ConditioningMode::Ief {
                demos: vec![Demonstration {
                    query: vec![1, 2, 3, 4],
                    answer: vec![4, 3, 2, 1],
                    rule_id: 0,
                }],
            }
        } else {
            ConditioningMode::OnPolicy
        };
        let mut t = Trajectory {
            mode,
            context: vec![29, 3, 1, 4, 2, 30],
            behavior_logprobs: vec![-1.0; generated.len()],
            entropies: vec![0.0; generated.len()],
            generated,
            raw_reward: 0.0,
            shaped_reward: 0.0,
            advantage: 0.0,
        };
        t.raw_reward = verifiable_reward(&task(), &t, &vocab());
        t.shaped_reward = t.raw_reward;
        t
    }

    fn group(cand_correct: bool) -> RolloutGroup {
        let trajs: Vec<_> = (0..8)
            .map(|i| {
                if i % 3 == 0 {
                    traj(vec![2, 4, 1, 3, 31], false)
                } else {
                    traj(vec![2, 4, 1, i, 31], false)
                }
            })
            .collect();
        let cand = if cand_correct {
            traj(vec![2, 4, 1, 3, 31], true)
        } else {
            traj(vec![0, 0, 0, 0, 31], true)
        };
        let mut g = RolloutGroup {
            task: task(),
            trajectories: trajs,
            ief_candidate: Some(cand),
            displaced: None,
            n_on: 8,
            n_off: 0,
            stats: None,
        };
        g.refresh_stats();
        g
    }

    #[test]
    fn reward_examples() {
        let v = vocab();
        assert_eq!(
            verifiable_reward(&task(), &traj(vec![2, 4, 1, 3, 31], false), &v),
            1.0
        );
        assert_eq!(
            verifiable_reward(&task(), &traj(vec![2, 4, 1, 2, 31], false), &v),
            0.0
        );
        assert_eq!(
            verifiable_reward(&task(), &traj(vec![2, 4, 1, 2, 2, 2], false), &v),
            0.0
        );
    }

    #[test]
    fn accept_examples() {
        let v = vocab();
        let good = traj(vec![2, 4, 1, 3, 31], true);
        let bad = traj(vec![2, 4, 1, 1, 31], true);
        let cfg = ShapingConfig::default();
        assert!(expert_region_accept(&good, &task(), &v, &cfg));
        assert!(!expert_region_accept(&bad, &task(), &v, &cfg));
        let half = ShapingConfig {
            delta: 0.5,
            ..cfg.clone()
        };
        assert!(expert_region_accept(&good, &task(), &v, &half));
        // a reward claim the verifier disagrees with is still rejected
        let mut liar = bad.clone();
        liar.raw_reward = 1.0;
        assert!(!expert_region_accept(&liar, &task(), &v, &cfg));
    }

    #[test]
    fn bonus_examples() {
        let cfg = ShapingConfig::default();
        assert_eq!(annealed_bonus(1.0, 0, &cfg), 2.0);
        assert_eq!(annealed_bonus(1.0, 400, &cfg), 1.0);
        assert_eq!(annealed_bonus(1.0, 100, &cfg), 1.75);
        assert_eq!(annealed_bonus(1.0, 500, &cfg), 1.0);
        assert_eq!(anneal_weight(500, 400), (0.0, true));
    }

    #[test]
    fn accepted_candidate_at_step_zero() {
        let mut g = group(true);
        let out = mix_ief_into_group(&mut g, &vocab(), 0, &ShapingConfig::default(), 7);
        assert!(out.accepted);
        assert_eq!(out.bonus, 1.0);
        let ief: Vec<_> = g.trajectories.iter().filter(|t| t.mode.is_ief()).collect();
        assert_eq!(ief.len(), 1);
        assert_eq!(ief[0].shaped_reward, 2.0);
        assert_eq!(g.trajectories.len(), 8);
        assert_eq!((g.n_on, g.n_off), (7, 1));
        assert!(g.stats.is_none());
        assert!(g.displaced.is_some());
        assert_eq!(g.on_policy_raw_rewards().len(), 8);
    }

    #[test]
    fn accepted_without_shaping() {
        let mut g = group(true);
        let cfg = ShapingConfig {
            rs_enabled: false,
            ..ShapingConfig::default()
        };
        mix_ief_into_group(&mut g, &vocab(), 0, &cfg, 7);
        let t = g.trajectories.iter().find(|t| t.mode.is_ief()).unwrap();
        assert_eq!(t.shaped_reward, 1.0);
    }

    #[test]
    fn rejected_candidate_is_noop() {
        let mut g = group(false);
        let before = g.trajectories.clone();
        let out = mix_ief_into_group(&mut g, &vocab(), 0, &ShapingConfig::default(), 7);
        assert!(!out.accepted);
        assert_eq!(g.trajectories, before);
        assert_eq!((g.n_on, g.n_off), (8, 0));
        assert!(g.stats.is_some());
    }

    #[test]
    fn replacement_slot_is_seeded_and_spread() {
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..64 {
            let mut a = group(true);
            let mut b = group(true);
            mix_ief_into_group(&mut a, &vocab(), 3, &ShapingConfig::default(), seed);
            mix_ief_into_group(&mut b, &vocab(), 3, &ShapingConfig::default(), seed);
            assert_eq!(a, b);
            seen.insert(a.trajectories.iter().position(|t| t.mode.is_ief()).unwrap());
        }
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn shaped_reward_monotone_in_step() {
        let cfg = ShapingConfig::default();
        let mut prev = f64::INFINITY;
        for t in 0..=400 {
            let s = annealed_bonus(1.0, t, &cfg);
            assert!(s <= prev);
            assert!(s >= 1.0);
            prev = s;
        }
        assert_eq!(prev, 1.0);
    }

    #[test]
    fn config_bounds() {
        assert!(ShapingConfig::default().validate().is_ok());
        for bad in [
            ShapingConfig {
                delta: 0.0,
                ..Default::default()
            },
            ShapingConfig {
                delta: 1.5,
                ..Default::default()
            },
            ShapingConfig {
                alpha: -1.0,
                ..Default::default()
            },
            ShapingConfig {
                total_steps: 0,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(IcpoError::Config(_))));
        }
    }
}

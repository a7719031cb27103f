//! The clipped mixed-policy surrogate with shaped off-policy ratios, a k3 KL
//! penalty to the reference policy and optional entropy bonus.
//!
//! The loss is minimized, so it is the negated objective:
//!
//! ```text
//! loss = -(1/Z) [ sum_on sum_t CLIP(r, A, eps) + sum_off sum_t CLIP(f(r_hat), A, eps) ]
//!        + beta * KL - c_ent * H
//! ```
//!
//! with `Z` the number of generated tokens in the batch and
//! `f(x) = x / (x + lambda)`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IcpoError, Result};
use crate::policy::{loss_gradient, sequence_logprobs, PolicyCheckpoint};
use crate::rollout::{RolloutGroup, Trajectory};
use crate::tape::pairwise_sum;
use crate::task::Token;

/// Log-ratio ceiling for the KL estimator, `ln(1e6)`.
pub const KL_LOG_RATIO_CAP: f64 = 13.815510557964274;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSet {
    pub advantages: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub degenerate: bool,
}

/// Context the current policy is scored on for expert-conditioned tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffPolicyContext {
    /// The bare prompt: the ratio compares the unconditioned policy with the
    /// expert-conditioned behavior distribution.
    #[default]
    Query,
    /// The same expert context the candidate was sampled from.
    Expert,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub epsilon_clip: f64,
    pub lambda_shape: f64,
    pub beta_kl: f64,
    pub entropy_coef: f64,
    pub eps_std: f64,
    /// Apply `f` to off-policy ratios. Off gives the unshaped mixed objective.
    pub shape_off_policy: bool,
    pub off_policy_context: OffPolicyContext,
    /// Temperature of the current policy's distributions; must match the
    /// on-policy sampling temperature for ratios to start at 1.
    pub temperature: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            epsilon_clip: 0.2,
            lambda_shape: 0.01,
            beta_kl: 1e-3,
            entropy_coef: 0.0,
            eps_std: 1e-6,
            shape_off_policy: true,
            off_policy_context: OffPolicyContext::Query,
            temperature: 1.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_clip > 0.0 && self.epsilon_clip < 1.0) {
            return Err(IcpoError::Config(format!(
                "epsilon_clip must lie in (0, 1), got {}",
                self.epsilon_clip
            )));
        }
        if !(self.lambda_shape > 0.0) {
            return Err(IcpoError::Config(format!(
                "lambda_shape must be > 0, got {}",
                self.lambda_shape
            )));
        }
        if !(self.beta_kl >= 0.0) {
            return Err(IcpoError::Config(format!(
                "beta_kl must be >= 0, got {}",
                self.beta_kl
            )));
        }
        if !(self.eps_std >= 0.0) || !self.entropy_coef.is_finite() {
            return Err(IcpoError::Config(
                "eps_std and entropy_coef must be finite".into(),
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(IcpoError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// `(R_i - mean) / std` with population std; all zeros when `std < eps_std`.
pub fn group_advantages(rewards: &[f64], eps_std: f64) -> Result<AdvantageSet> {
    if rewards.len() < 2 {
        return Err(IcpoError::Size(format!(
            "group advantages need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = pairwise_sum(rewards) / n;
    let dev: Vec<f64> = rewards.iter().map(|r| (r - mean) * (r - mean)).collect();
    let std = (pairwise_sum(&dev) / n).sqrt();
    let degenerate = std < eps_std;
    let advantages = if degenerate {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mean) / std).collect()
    };
    Ok(AdvantageSet {
        advantages,
        mean,
        std,
        degenerate,
    })
}

/// `min(r A, clip(r, 1 - eps, 1 + eps) A)`.
pub fn clip_term(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// `x / (x + lambda)`.
pub fn shape_ratio(ratio: f64, lambda: f64) -> f64 {
    ratio / (ratio + lambda)
}

/// `exp(new - behavior)`.
pub fn importance_ratio(new_logprob: f64, behavior_logprob: f64) -> Result<f64> {
    let r = (new_logprob - behavior_logprob).exp();
    if !r.is_finite() {
        return Err(IcpoError::Numerical(format!(
            "importance ratio overflow: new {new_logprob}, behavior {behavior_logprob}"
        )));
    }
    Ok(r)
}

/// Per-token k3 value for log-ratio `ref - theta`; second field flags a cap.
pub fn k3(log_ratio: f64) -> (f64, bool) {
    let capped = log_ratio > KL_LOG_RATIO_CAP;
    let d = log_ratio.min(KL_LOG_RATIO_CAP);
    (d.exp() - d - 1.0, capped)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlEstimate {
    pub value: f64,
    pub clamped: bool,
}

/// Mean k3 over the trajectory's generated tokens, both policies scored on
/// the trajectory's own context.
pub fn kl_penalty(
    policy: &PolicyCheckpoint,
    reference: &PolicyCheckpoint,
    traj: &Trajectory,
    temperature: f64,
) -> Result<KlEstimate> {
    let lp = sequence_logprobs(policy, &traj.context, &traj.generated, temperature)?;
    let lr = sequence_logprobs(reference, &traj.context, &traj.generated, temperature)?;
    let mut clamped = false;
    let vals: Vec<f64> = lp
        .iter()
        .zip(&lr)
        .map(|(t, r)| {
            let (v, c) = k3(r - t);
            clamped |= c;
            v
        })
        .collect();
    Ok(KlEstimate {
        value: pairwise_sum(&vals) / vals.len() as f64,
        clamped,
    })
}

/// Recomputes every group's statistics over its mixed shaped rewards and
/// writes the advantages into the trajectories.
pub fn assign_advantages(groups: &mut [RolloutGroup], eps_std: f64) -> Result<Vec<AdvantageSet>> {
    groups
        .iter_mut()
        .map(|g| {
            g.refresh_stats();
            let set = group_advantages(&g.shaped_rewards(), eps_std)?;
            for (t, a) in g.trajectories.iter_mut().zip(&set.advantages) {
                t.advantage = *a;
            }
            Ok(set)
        })
        .collect()
}

/// Per-term values; all signs are those of the minimized loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossDiagnostics {
    pub loss_total: f64,
    pub loss_on: f64,
    pub loss_off: f64,
    /// Mean k3 over on-policy tokens (before multiplying by beta).
    pub kl: f64,
    /// Mean next-token entropy of the current policy over on-policy tokens.
    pub entropy: f64,
    pub clip_fraction: f64,
    pub z_tokens: usize,
    pub kl_clamped: bool,
}

impl LossDiagnostics {
    /// Stable key names.
    pub fn to_map(&self) -> BTreeMap<&'static str, f64> {
        BTreeMap::from([
            ("loss_total", self.loss_total),
            ("loss_on", self.loss_on),
            ("loss_off", self.loss_off),
            ("kl", self.kl),
            ("entropy", self.entropy),
            ("clip_fraction", self.clip_fraction),
            ("z_tokens", self.z_tokens as f64),
        ])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub diagnostics: LossDiagnostics,
}

/// The bare `[QRY q SEP]` prompt at the tail of an expert context.
fn bare_suffix(context: &[Token], query_len: usize) -> &[Token] {
    &context[context.len() - (query_len + 2)..]
}

struct Piece {
    loss: f64,
    grad: Vec<f64>,
    surrogate: f64,
    off: bool,
    clipped: usize,
    kl_sum: f64,
    kl_clamped: bool,
    ent_sum: f64,
    tokens: usize,
}

struct Job<'a> {
    traj: &'a Trajectory,
    query_len: usize,
    ref_logprobs: Option<Vec<f64>>,
}

/// The batch loss, its gradient and diagnostics. Advantages must already be
/// assigned.
pub fn icpo_loss(
    policy: &PolicyCheckpoint,
    reference: &PolicyCheckpoint,
    groups: &[RolloutGroup],
    cfg: &ObjectiveConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    let trajs: Vec<(&Trajectory, usize)> = groups
        .iter()
        .flat_map(|g| g.trajectories.iter().map(move |t| (t, g.task.query.len())))
        .collect();
    if trajs.is_empty() {
        return Err(IcpoError::Size("empty batch".into()));
    }
    if policy.params.len() != reference.params.len() {
        return Err(IcpoError::Size("policy and reference shapes differ".into()));
    }
    for (t, _) in &trajs {
        if t.generated.is_empty() || t.behavior_logprobs.len() != t.generated.len() {
            return Err(IcpoError::Precondition(
                "every trajectory needs one behavior logprob per generated token".into(),
            ));
        }
    }
    let z: usize = trajs.iter().map(|(t, _)| t.generated.len()).sum();
    let n_on_tokens: usize = trajs
        .iter()
        .filter(|(t, _)| !t.mode.is_ief())
        .map(|(t, _)| t.generated.len())
        .sum();
    let inv_z = 1.0 / z as f64;
    let per_on = if n_on_tokens > 0 {
        1.0 / n_on_tokens as f64
    } else {
        0.0
    };

    let jobs: Vec<Job<'_>> = trajs
        .iter()
        .map(|&(traj, query_len)| {
            let ref_logprobs = if traj.mode.is_ief() {
                None
            } else {
                Some(sequence_logprobs(
                    reference,
                    &traj.context,
                    &traj.generated,
                    cfg.temperature,
                )?)
            };
            Ok(Job {
                traj,
                query_len,
                ref_logprobs,
            })
        })
        .collect::<Result<_>>()?;

    let pieces: Vec<Piece> = jobs
        .par_iter()
        .map(|job| trajectory_piece(policy, job, cfg, inv_z, per_on))
        .collect::<Result<_>>()?;

    let mut grad = vec![0.0; policy.params.len()];
    let mut d = LossDiagnostics {
        z_tokens: z,
        ..Default::default()
    };
    let mut losses = Vec::with_capacity(pieces.len());
    let (mut on, mut off, mut kl, mut ent) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut clipped = 0;
    for p in &pieces {
        for (g, pg) in grad.iter_mut().zip(&p.grad) {
            *g += pg;
        }
        losses.push(p.loss);
        if p.off {
            off.push(p.surrogate);
        } else {
            on.push(p.surrogate);
            kl.push(p.kl_sum);
            ent.push(p.ent_sum);
        }
        clipped += p.clipped;
        d.kl_clamped |= p.kl_clamped;
        debug_assert!(p.tokens > 0);
    }
    d.loss_on = -inv_z * pairwise_sum(&on);
    d.loss_off = -inv_z * pairwise_sum(&off);
    d.kl = per_on * pairwise_sum(&kl);
    d.entropy = per_on * pairwise_sum(&ent);
    d.clip_fraction = clipped as f64 / z as f64;
    let loss = pairwise_sum(&losses);
    d.loss_total = loss;
    if !loss.is_finite() {
        return Err(IcpoError::Numerical(format!("non-finite loss {loss}")));
    }
    Ok(LossOutput {
        loss,
        grad,
        diagnostics: d,
    })
}

fn trajectory_piece(
    policy: &PolicyCheckpoint,
    job: &Job<'_>,
    cfg: &ObjectiveConfig,
    inv_z: f64,
    per_on: f64,
) -> Result<Piece> {
    let traj = job.traj;
    let off = traj.mode.is_ief();
    let context: &[Token] = if off && cfg.off_policy_context == OffPolicyContext::Query {
        bare_suffix(&traj.context, job.query_len)
    } else {
        &traj.context
    };
    let n = traj.generated.len();
    let a = traj.advantage;
    let eps = cfg.epsilon_clip;
    let mut surrogate = 0.0;
    let mut clipped = 0;
    let mut kl_sum = 0.0;
    let mut kl_clamped = false;
    let mut ent_sum = 0.0;
    let (loss, grad) = loss_gradient(policy, |tape, w| {
        let lsm = w.sequence_log_softmax(tape, context, &traj.generated, cfg.temperature)?;
        let lp = tape.pick_cols(lsm, &traj.generated);
        let beh = tape.input(n, 1, traj.behavior_logprobs.clone());
        let log_r = tape.sub(lp, beh);
        let mut r = tape.exp(log_r);
        if off && cfg.shape_off_policy {
            let denom = tape.add_scalar(r, cfg.lambda_shape);
            r = tape.div(r, denom);
        }
        for &rv in tape.value(r) {
            if !rv.is_finite() {
                return Err(IcpoError::Numerical(format!("non-finite ratio {rv}")));
            }
            if (rv.clamp(1.0 - eps, 1.0 + eps) * a) < rv * a {
                clipped += 1;
            }
            surrogate += clip_term(rv, a, eps);
        }
        let ra = tape.scale(r, a);
        let rc = tape.clamp(r, 1.0 - eps, 1.0 + eps);
        let rca = tape.scale(rc, a);
        let m = tape.min(ra, rca);
        let s = tape.sum(m);
        let mut total = tape.scale(s, -inv_z);

        if !off {
            let lsm_v = tape.value(lsm);
            let v = lsm_v.len() / n;
            ent_sum = -lsm_v
                .chunks(v)
                .map(|row| row.iter().map(|l| l.exp() * l).sum::<f64>())
                .sum::<f64>();
            let refs = job
                .ref_logprobs
                .as_ref()
                .expect("on-policy reference logprobs");
            for (rl, tl) in refs.iter().zip(tape.value(lp)) {
                let (k, c) = k3(rl - tl);
                kl_sum += k;
                kl_clamped |= c;
            }
            if cfg.beta_kl != 0.0 {
                let rin = tape.input(n, 1, refs.clone());
                let dl = tape.sub(rin, lp);
                let dl = tape.clamp(dl, f64::NEG_INFINITY, KL_LOG_RATIO_CAP);
                let e = tape.exp(dl);
                let k = tape.sub(e, dl);
                let k = tape.add_scalar(k, -1.0);
                let ks = tape.sum(k);
                let term = tape.scale(ks, cfg.beta_kl * per_on);
                total = tape.add(total, term);
            }
            if cfg.entropy_coef != 0.0 {
                let p = tape.exp(lsm);
                let plp = tape.mul(p, lsm);
                let neg_h = tape.sum(plp);
                let term = tape.scale(neg_h, cfg.entropy_coef * per_on);
                total = tape.add(total, term);
            }
        }
        Ok(total)
    })?;
    Ok(Piece {
        loss,
        grad,
        surrogate,
        off,
        clipped,
        kl_sum,
        kl_clamped,
        ent_sum,
        tokens: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{next_token_logprobs, Arch};
    use crate::rng::rng_from;
    use crate::rollout::ConditioningMode;
    use crate::task::{Demonstration, TaskInstance};
    use proptest::prelude::*;
    use rand::Rng;

    fn arch() -> Arch {
        Arch {
            vocab: 8,
            d_model: 8,
            max_context: 24,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
        }
    }

    const QRY: usize = 5;
    const SEP: usize = 6;

    fn traj(context: Vec<usize>, generated: Vec<usize>, ief: bool) -> Trajectory {
        Trajectory {
            mode: if ief {
                ConditioningMode::Ief {
                    demos: vec![Demonstration {
                        query: vec![1, 2],
                        answer: vec![2, 1],
                        rule_id: 0,
                    }],
                }
            } else {
                ConditioningMode::OnPolicy
            },
            behavior_logprobs: vec![0.0; generated.len()],
            entropies: vec![0.0; generated.len()],
            context,
            generated,
            raw_reward: 0.0,
            shaped_reward: 0.0,
            advantage: 0.0,
        }
    }

    fn group_of(trajs: Vec<Trajectory>, query: Vec<usize>) -> RolloutGroup {
        let n_off = trajs.iter().filter(|t| t.mode.is_ief()).count();
        RolloutGroup {
            task: TaskInstance {
                rule_id: 0,
                gold_answer: query.clone(),
                query,
            },
            n_on: trajs.len() - n_off,
            n_off,
            trajectories: trajs,
            ief_candidate: None,
            displaced: None,
            stats: None,
        }
    }

    /// Random batch with behavior logprobs from a perturbed snapshot so the
    /// ratios are away from 1 and some clip.
    fn random_batch(seed: u64, policy: &PolicyCheckpoint) -> Vec<RolloutGroup> {
        let mut rng = rng_from(seed);
        let mut old = policy.clone();
        for p in old.params.iter_mut() {
            *p += rng.gen_range(-0.3..0.3);
        }
        let n_groups = rng.gen_range(1..3);
        (0..n_groups)
            .map(|_| {
                let q: Vec<usize> = (0..2).map(|_| rng.gen_range(0..5)).collect();
                let bare = vec![QRY, q[0], q[1], SEP];
                let mut expert = vec![QRY, 1, 2, SEP, 2, 1, 7];
                expert.extend(&bare);
                let n = rng.gen_range(2..5);
                let trajs: Vec<Trajectory> = (0..n)
                    .map(|j| {
                        let ief = j == 0 && rng.gen_bool(0.6);
                        let ctx = if ief { expert.clone() } else { bare.clone() };
                        let len = rng.gen_range(1..4);
                        let gen: Vec<usize> = (0..len).map(|_| rng.gen_range(0..8)).collect();
                        let mut t = traj(ctx, gen, ief);
                        t.behavior_logprobs =
                            sequence_logprobs(&old, &t.context, &t.generated, 1.0).unwrap();
                        t.shaped_reward = rng.gen_range(0..3) as f64 * 0.5;
                        t
                    })
                    .collect();
                group_of(trajs, q)
            })
            .collect()
    }

    #[test]
    fn advantage_examples() {
        let a = group_advantages(&[1.0, 1.0, 0.0, 0.0], 1e-6).unwrap();
        assert_eq!(a.advantages, vec![1.0, 1.0, -1.0, -1.0]);
        assert!(!a.degenerate);

        // mean 1/4, population std sqrt(3)/4
        let s3 = 3f64.sqrt();
        let a = group_advantages(&[1.0, 0.0, 0.0, 0.0], 1e-6).unwrap();
        let want = [s3, -1.0 / s3, -1.0 / s3, -1.0 / s3];
        for (x, w) in a.advantages.iter().zip(want) {
            assert!((x - w).abs() < 1e-12, "{x} vs {w}");
        }
        assert!((a.advantages[0] - 1.7321).abs() < 1e-4);
        assert!((a.advantages[1] + 0.5774).abs() < 1e-4);

        let a = group_advantages(&[1.0; 4], 1e-6).unwrap();
        assert_eq!(a.advantages, vec![0.0; 4]);
        assert!(a.degenerate);

        assert!(matches!(
            group_advantages(&[1.0], 1e-6),
            Err(IcpoError::Size(_))
        ));
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_term(1.5, 1.0, 0.2), 1.2);
        assert_eq!(clip_term(0.5, -1.0, 0.2), -0.8);
        for a in [-3.0, -0.5, 0.0, 0.7, 2.0] {
            assert_eq!(clip_term(1.0, a, 0.2), a);
        }
    }

    #[test]
    fn shape_examples() {
        assert!((shape_ratio(1.0, 0.01) - 1.0 / 1.01).abs() < 1e-15);
        assert!((shape_ratio(1.0, 0.01) - 0.990099).abs() < 1e-6);
        assert_eq!(shape_ratio(0.0, 0.01), 0.0);
        assert!((shape_ratio(100.0, 0.01) - 100.0 / 100.01).abs() < 1e-15);
        assert!((shape_ratio(100.0, 0.01) - 0.9999).abs() < 1e-6);
        let pts = [0.0, 0.001, 0.5, 1.0, 10.0, 100.0, 1e6];
        for w in pts.windows(2) {
            assert!(shape_ratio(w[0], 0.01) < shape_ratio(w[1], 0.01));
        }
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(importance_ratio(-1.3, -1.3).unwrap(), 1.0);
        assert!((importance_ratio(-1.0 + 2f64.ln(), -1.0).unwrap() - 2.0).abs() < 1e-12);
        assert!((importance_ratio(-1.0 - 2f64.ln(), -1.0).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(
            importance_ratio(1000.0, -1000.0),
            Err(IcpoError::Numerical(_))
        ));
    }

    #[test]
    fn kl_of_identical_policies_is_zero() {
        let p = PolicyCheckpoint::init(arch(), 3).unwrap();
        let t = traj(vec![QRY, 1, 2, SEP], vec![3, 4, 7], false);
        assert_eq!(kl_penalty(&p, &p, &t, 1.0).unwrap().value, 0.0);
    }

    #[test]
    fn k3_expectation_is_exact_kl() {
        // Averaging k3 over the full vocabulary weighted by pi_theta must give
        // the exact KL(pi_theta || pi_ref) at every prefix.
        let theta = PolicyCheckpoint::init(arch(), 11).unwrap();
        let reference = PolicyCheckpoint::init(arch(), 12).unwrap();
        for ctx in [vec![QRY, 1, 2, SEP], vec![QRY, 4, 0, SEP, 2]] {
            let lt = next_token_logprobs(&theta, &ctx, 1.0).unwrap();
            let lr = next_token_logprobs(&reference, &ctx, 1.0).unwrap();
            let exact: f64 = lt.iter().zip(&lr).map(|(t, r)| t.exp() * (t - r)).sum();
            let via_k3: f64 = lt.iter().zip(&lr).map(|(t, r)| t.exp() * k3(r - t).0).sum();
            assert!(exact > 0.0);
            assert!((exact - via_k3).abs() < 1e-12, "{exact} vs {via_k3}");

            // the per-trajectory estimator on a single token equals k3 there
            for x in 0..8 {
                let t = traj(ctx.clone(), vec![x], false);
                let est = kl_penalty(&theta, &reference, &t, 1.0).unwrap().value;
                assert!((est - k3(lr[x] - lt[x]).0).abs() < 1e-12);
                assert!(est >= 0.0);
            }
        }
    }

    #[test]
    fn k3_cap_flags() {
        let (v, c) = k3(50.0);
        assert!(c);
        assert!((v - (1e6 - KL_LOG_RATIO_CAP - 1.0)).abs() < 1e-6);
        assert!(!k3(-50.0).1);
        assert!(k3(-50.0).0 > 0.0);
    }

    fn synced(policy: &PolicyCheckpoint, t: &mut Trajectory, ctx: &[usize]) {
        t.behavior_logprobs = sequence_logprobs(policy, ctx, &t.generated, 1.0).unwrap();
    }

    #[test]
    fn two_trajectory_hand_value() {
        let policy = PolicyCheckpoint::init(arch(), 5).unwrap();
        let bare = vec![QRY, 1, 2, SEP];
        let mut expert = vec![QRY, 2, 3, SEP, 3, 2, 7];
        expert.extend(&bare);
        let cfg = ObjectiveConfig {
            beta_kl: 0.0,
            ..Default::default()
        };

        // both on-policy: the two advantages cancel
        let mut a = traj(bare.clone(), vec![2], false);
        let mut b = traj(bare.clone(), vec![4], false);
        synced(&policy, &mut a, &bare);
        synced(&policy, &mut b, &bare);
        a.shaped_reward = 1.0;
        let mut groups = vec![group_of(vec![a.clone(), b.clone()], vec![1, 2])];
        assign_advantages(&mut groups, 1e-6).unwrap();
        let out = icpo_loss(&policy, &policy, &groups, &cfg).unwrap();
        assert!(out.loss.abs() < 1e-12);

        // rewarded trajectory off-policy with r_hat = 1
        let mut a_off = traj(expert.clone(), vec![2], true);
        synced(&policy, &mut a_off, &bare);
        a_off.shaped_reward = 1.0;
        let mut groups = vec![group_of(vec![a_off, b], vec![1, 2])];
        assign_advantages(&mut groups, 1e-6).unwrap();
        let out = icpo_loss(&policy, &policy, &groups, &cfg).unwrap();
        let want = -(1.0 / 1.01 - 1.0) / 2.0;
        assert!((out.loss - want).abs() < 1e-12, "{} vs {want}", out.loss);
        assert!((out.loss - 0.00495).abs() < 1e-5);
        assert_eq!(out.diagnostics.z_tokens, 2);
        assert!((out.diagnostics.loss_off + 0.5 / 1.01).abs() < 1e-12);
        assert!((out.diagnostics.loss_on - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_batch_annihilates() {
        let policy = PolicyCheckpoint::init(arch(), 5).unwrap();
        let mut groups = random_batch(3, &policy);
        for g in &mut groups {
            for t in &mut g.trajectories {
                t.shaped_reward = 1.0;
            }
        }
        let sets = assign_advantages(&mut groups, 1e-6).unwrap();
        assert!(sets.iter().all(|s| s.degenerate));
        let cfg = ObjectiveConfig {
            beta_kl: 0.0,
            ..Default::default()
        };
        let out = icpo_loss(&policy, &policy, &groups, &cfg).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn empty_batch_is_size_error() {
        let policy = PolicyCheckpoint::init(arch(), 5).unwrap();
        assert!(matches!(
            icpo_loss(&policy, &policy, &[], &ObjectiveConfig::default()),
            Err(IcpoError::Size(_))
        ));
    }

    #[test]
    fn sync_identity_matches_vanilla_policy_gradient() {
        let policy = PolicyCheckpoint::init(arch(), 21).unwrap();
        let mut groups = random_batch(8, &policy);
        for g in &mut groups {
            for t in &mut g.trajectories {
                t.mode = ConditioningMode::OnPolicy;
                t.context = bare_suffix(&t.context, 2).to_vec();
                t.behavior_logprobs =
                    sequence_logprobs(&policy, &t.context, &t.generated, 1.0).unwrap();
            }
        }
        assign_advantages(&mut groups, 1e-6).unwrap();
        let cfg = ObjectiveConfig {
            beta_kl: 0.0,
            ..Default::default()
        };
        let out = icpo_loss(&policy, &policy, &groups, &cfg).unwrap();
        let z: usize = groups
            .iter()
            .flat_map(|g| &g.trajectories)
            .map(|t| t.len())
            .sum();

        // every on-policy token contributes exactly its advantage
        let want: f64 = -groups
            .iter()
            .flat_map(|g| &g.trajectories)
            .map(|t| t.advantage * t.len() as f64)
            .sum::<f64>()
            / z as f64;
        assert!((out.loss - want).abs() < 1e-9);
        assert_eq!(out.diagnostics.clip_fraction, 0.0);

        // central differences of -(1/Z) sum A log pi, no tape involved
        let pg = |params: &[f64]| -> f64 {
            let ck = PolicyCheckpoint::from_params(arch(), 0, params.to_vec()).unwrap();
            -groups
                .iter()
                .flat_map(|g| &g.trajectories)
                .map(|t| {
                    let lp = sequence_logprobs(&ck, &t.context, &t.generated, 1.0).unwrap();
                    t.advantage * lp.iter().sum::<f64>()
                })
                .sum::<f64>()
                / z as f64
        };
        let h = 1e-5;
        let mut params = policy.params.clone();
        for i in 0..params.len() {
            let x = params[i];
            params[i] = x + h;
            let up = pg(&params);
            params[i] = x - h;
            let dn = pg(&params);
            params[i] = x;
            let fd = (up - dn) / (2.0 * h);
            assert!(
                (fd - out.grad[i]).abs() < 1e-7 * (1.0 + fd.abs()),
                "param {i}: {fd} vs {}",
                out.grad[i]
            );
        }
    }

    /// Relative error of the analytic gradient against central differences of
    /// the loss value, over the coordinates with the largest gradients plus a
    /// random sample.
    pub(crate) fn max_fd_rel_error(
        policy: &PolicyCheckpoint,
        reference: &PolicyCheckpoint,
        groups: &[RolloutGroup],
        cfg: &ObjectiveConfig,
        seed: u64,
    ) -> f64 {
        let out = icpo_loss(policy, reference, groups, cfg).unwrap();
        let mut idx: Vec<usize> = (0..out.grad.len()).collect();
        idx.sort_by(|&a, &b| out.grad[b].abs().total_cmp(&out.grad[a].abs()));
        let mut rng = rng_from(seed);
        let mut pick: Vec<usize> = idx[..16].to_vec();
        pick.extend((0..16).map(|_| rng.gen_range(0..out.grad.len())));
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in pick {
            let mut p = policy.clone();
            p.params[i] += h;
            let up = icpo_loss(&p, reference, groups, cfg).unwrap().loss;
            p.params[i] -= 2.0 * h;
            let dn = icpo_loss(&p, reference, groups, cfg).unwrap().loss;
            let fd = (up - dn) / (2.0 * h);
            let err = (fd - out.grad[i]).abs() / fd.abs().max(out.grad[i].abs()).max(1e-3);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            let policy = PolicyCheckpoint::init(arch(), 100 + seed).unwrap();
            let reference = PolicyCheckpoint::init(arch(), 200 + seed).unwrap();
            let mut groups = random_batch(seed, &policy);
            assign_advantages(&mut groups, 1e-6).unwrap();
            let cfg = ObjectiveConfig {
                beta_kl: 0.05,
                entropy_coef: if seed % 2 == 0 { 0.01 } else { 0.0 },
                off_policy_context: if seed % 3 == 0 {
                    OffPolicyContext::Expert
                } else {
                    OffPolicyContext::Query
                },
                ..Default::default()
            };
            let err = max_fd_rel_error(&policy, &reference, &groups, &cfg, seed);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn shaping_applies_only_to_ief_tokens() {
        let policy = PolicyCheckpoint::init(arch(), 31).unwrap();
        let mut groups = random_batch(4, &policy);
        assign_advantages(&mut groups, 1e-6).unwrap();
        let base = ObjectiveConfig {
            beta_kl: 0.0,
            ..Default::default()
        };
        let unshaped = ObjectiveConfig {
            shape_off_policy: false,
            ..base.clone()
        };
        let a = icpo_loss(&policy, &policy, &groups, &base)
            .unwrap()
            .diagnostics;
        let b = icpo_loss(&policy, &policy, &groups, &unshaped)
            .unwrap()
            .diagnostics;
        assert_eq!(a.loss_on, b.loss_on);
        let has_off = groups
            .iter()
            .flat_map(|g| &g.trajectories)
            .any(|t| t.mode.is_ief());
        assert_eq!(a.loss_off != b.loss_off, has_off);
    }

    #[test]
    fn diagnostics_keys_are_stable() {
        let keys: Vec<_> = LossDiagnostics::default().to_map().into_keys().collect();
        assert_eq!(
            keys,
            [
                "clip_fraction",
                "entropy",
                "kl",
                "loss_off",
                "loss_on",
                "loss_total",
                "z_tokens"
            ]
        );
    }

    proptest! {
        #[test]
        fn clip_is_bounded(r in 0.0f64..10.0, a in -5.0f64..5.0, eps in 0.01f64..0.99) {
            let v = clip_term(r, a, eps);
            prop_assert!(v.abs() <= (r * a).abs().max((1.0 + eps) * a.abs()) + 1e-12);
        }

        #[test]
        fn shape_in_unit_interval(r in 0.0f64..1e6, lam in 1e-4f64..1.0, dr in 1e-3f64..10.0) {
            let f = shape_ratio(r, lam);
            prop_assert!((0.0..1.0).contains(&f));
            prop_assert!(shape_ratio(r + dr, lam) > f);
        }

        #[test]
        fn normalized_advantages(rs in proptest::collection::vec(0.0f64..3.0, 2..16)) {
            let set = group_advantages(&rs, 1e-6).unwrap();
            if set.degenerate {
                prop_assert!(set.advantages.iter().all(|a| *a == 0.0));
            } else {
                let n = rs.len() as f64;
                let m = set.advantages.iter().sum::<f64>() / n;
                let s = (set.advantages.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n).sqrt();
                prop_assert!(m.abs() < 1e-9);
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn k3_nonnegative(d in -30.0f64..30.0) {
            prop_assert!(k3(d).0 >= 0.0);
        }
    }
}

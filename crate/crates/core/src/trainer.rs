//! Supervised warm start and the mixed-policy training loop.
//!
//! Step `t` runs from `1` to `T`. All randomness of a step is derived from
//! `(seed, t, prompt index)`, so a run resumed from saved state replays the
//! remaining steps exactly.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{io, IcpoError, Result};
use crate::objective::{assign_advantages, icpo_loss, LossDiagnostics};
use crate::optim::{optimizer_update, AdamState};
use crate::policy::{clone_frozen, loss_gradient, PolicyCheckpoint};
use crate::rng::{derive_seed, rng_from, stream};
use crate::rollout::{generate_group, RolloutGroup, RolloutRecord};
use crate::shaping::mix_ief_into_group;
use crate::task::{
    build_expert_context, build_query_context, generate_task, sample_demonstrations, DemoBank,
    Split, TaskFamily, TaskInstance, Token,
};
use crate::telemetry::{
    append_jsonl, classify_pass_groups, evaluate, read_jsonl, zero_shot_accuracy, MetricsSink,
    StepMetrics,
};

/// Task family, demonstration bank and held-out tasks of one configuration.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub cfg: TrainConfig,
    pub family: TaskFamily,
    pub bank: DemoBank,
    pub eval_tasks: Vec<TaskInstance>,
}

impl Experiment {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let family = TaskFamily::new(&cfg.rule_family())?;
        let bank = family.build_bank(derive_seed(cfg.seed, &[stream::BANK]))?;
        let eval_tasks = held_out_tasks(&family, cfg.eval_tasks, cfg.seed);
        Ok(Self {
            cfg,
            family,
            bank,
            eval_tasks,
        })
    }
}

/// `n` evaluation-split tasks.
pub fn held_out_tasks(family: &TaskFamily, n: usize, seed: u64) -> Vec<TaskInstance> {
    (0..n)
        .map(|i| family.generate_in(derive_seed(seed, &[stream::EVAL, i as u64]), Split::Eval))
        .collect()
}

/// The training prompts of step `t`.
pub fn step_tasks(family: &TaskFamily, cfg: &TrainConfig, step: u64) -> Vec<TaskInstance> {
    (0..cfg.batch_prompts)
        .map(|i| {
            generate_task(
                derive_seed(cfg.seed, &[stream::TASK, step, i as u64]),
                family,
            )
        })
        .collect()
}

fn group_seed(seed: u64, step: u64, prompt: usize) -> u64 {
    derive_seed(seed, &[step, prompt as u64])
}

/// Sum of independent per-item losses and gradients, reduced in item order.
fn summed_gradient<F>(ckpt: &PolicyCheckpoint, n: usize, item: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(usize, &mut crate::tape::Tape<'_>, &crate::policy::Weights) -> Result<crate::tape::Var>
        + Sync,
{
    let parts: Vec<(f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| loss_gradient(ckpt, |tape, w| item(i, tape, w)))
        .collect::<Result<_>>()?;
    let mut grad = vec![0.0; ckpt.params.len()];
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

/// One periodic warm-start measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmStartProbe {
    pub step: u64,
    pub loss: f64,
    pub accuracy_0shot: f64,
    pub accuracy_kshot: f64,
}

#[derive(Clone, Debug)]
pub struct WarmStartOutcome {
    pub checkpoint: PolicyCheckpoint,
    pub steps: u64,
    pub accuracy_0shot: f64,
    pub accuracy_kshot: f64,
    pub history: Vec<WarmStartProbe>,
}

/// A supervised sequence: context, then answer and EOS as targets.
fn warm_start_example(
    family: &TaskFamily,
    bank: &DemoBank,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Vec<Token>, Vec<Token>)> {
    let task = generate_task(seed, family);
    let mut rng = rng_from(derive_seed(seed, &[stream::WARM_START]));
    let vocab = &family.vocab;
    let zero_shot = rng.gen::<f64>() < cfg.warm_start_zero_shot_frac;
    let context = if zero_shot {
        build_query_context(&task.query, vocab)
    } else {
        let demos =
            sample_demonstrations(bank, task.rule_id, cfg.k_demos, seed, Some(&task.query))?;
        build_expert_context(&demos, &task.query, vocab, cfg.max_context)?
    };
    let mut target = task.gold_answer;
    target.push(vocab.eos());
    Ok((context, target))
}

/// Maximum likelihood on mixed 0-shot and k-shot sequences until held-out
/// k-shot accuracy beats 0-shot accuracy by the configured margin.
pub fn warm_start(
    cfg: &TrainConfig,
    family: &TaskFamily,
    bank: &DemoBank,
    rng_seed: u64,
) -> Result<WarmStartOutcome> {
    if bank.is_empty() {
        return Err(IcpoError::Precondition(
            "warm start needs a populated bank".into(),
        ));
    }
    let mut ckpt = PolicyCheckpoint::init(cfg.arch(), derive_seed(rng_seed, &[stream::INIT]))?;
    let mut adam = AdamState::new(ckpt.params.len());
    let adam_cfg = cfg.warm_start_adam();
    let probe_tasks = held_out_tasks(
        family,
        cfg.warm_start_eval_tasks,
        derive_seed(rng_seed, &[stream::WARM_START]),
    );
    let eval_cfg = cfg.eval();
    let mut history = Vec::new();
    let mut last = (0.0, 0.0);
    let batch = cfg.warm_start_batch;
    for step in 1..=cfg.warm_start_steps {
        let examples: Vec<(Vec<Token>, Vec<Token>)> = (0..batch)
            .map(|i| {
                warm_start_example(
                    family,
                    bank,
                    cfg,
                    derive_seed(rng_seed, &[stream::WARM_START, step, i as u64]),
                )
            })
            .collect::<Result<_>>()?;
        let (loss, grad) = summed_gradient(&ckpt, batch, |i, tape, w| {
            let (ctx, target) = &examples[i];
            let lp = w.sequence_logprobs(tape, ctx, target, 1.0)?;
            let s = tape.sum(lp);
            Ok(tape.scale(s, -1.0 / (target.len() * batch) as f64))
        })?;
        optimizer_update(&mut ckpt.params, &grad, &mut adam, &adam_cfg)?;
        ckpt.version += 1;

        if step % cfg.warm_start_eval_every == 0 || step == cfg.warm_start_steps {
            let r = evaluate(
                &ckpt,
                &probe_tasks,
                bank,
                &eval_cfg,
                &[derive_seed(rng_seed, &[stream::EVAL, step])],
            )?;
            last = (r.accuracy_0shot, r.accuracy_kshot);
            info!(
                "warm start {step}: loss {loss:.4} 0-shot {:.3} {}-shot {:.3}",
                r.accuracy_0shot, cfg.k_demos, r.accuracy_kshot
            );
            history.push(WarmStartProbe {
                step,
                loss,
                accuracy_0shot: r.accuracy_0shot,
                accuracy_kshot: r.accuracy_kshot,
            });
            if step >= cfg.warm_start_min_steps
                && r.accuracy_kshot - r.accuracy_0shot >= cfg.warm_start_margin
            {
                return Ok(WarmStartOutcome {
                    checkpoint: ckpt,
                    steps: step,
                    accuracy_0shot: r.accuracy_0shot,
                    accuracy_kshot: r.accuracy_kshot,
                    history,
                });
            }
        }
    }
    Err(IcpoError::WarmStartFailed {
        steps: cfg.warm_start_steps,
        zero_shot: last.0,
        k_shot: last.1,
        margin: cfg.warm_start_margin,
    })
}

/// Current, behavior and reference policies with optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub theta: PolicyCheckpoint,
    pub theta_old: PolicyCheckpoint,
    pub reference: PolicyCheckpoint,
    pub adam: AdamState,
    /// Index of the next step; also the annealing position of that step.
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    step: u64,
    adam_t: u64,
}

impl TrainerState {
    /// Fresh state whose reference is `init`.
    pub fn new(init: PolicyCheckpoint, step: u64) -> Self {
        let n = init.params.len();
        Self {
            theta_old: clone_frozen(&init),
            reference: clone_frozen(&init),
            theta: init,
            adam: AdamState::new(n),
            step,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        self.theta.save(&dir.join("theta.ckpt"))?;
        self.theta_old.save(&dir.join("theta_old.ckpt"))?;
        self.reference.save(&dir.join("ref.ckpt"))?;
        let arch = self.theta.arch;
        PolicyCheckpoint::from_params(arch, self.adam.t, self.adam.m.clone())?
            .save(&dir.join("adam_m.ckpt"))?;
        PolicyCheckpoint::from_params(arch, self.adam.t, self.adam.v.clone())?
            .save(&dir.join("adam_v.ckpt"))?;
        let header = StateHeader {
            step: self.step,
            adam_t: self.adam.t,
        };
        let path = dir.join("state.json");
        let text =
            serde_json::to_string_pretty(&header).map_err(|e| IcpoError::Serde(e.to_string()))?;
        fs::write(&path, text).map_err(|e| io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("state.json");
        let text = fs::read_to_string(&path).map_err(|e| io(&path, e))?;
        let header: StateHeader = serde_json::from_str(&text).map_err(|e| IcpoError::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let m = PolicyCheckpoint::load(&dir.join("adam_m.ckpt"))?;
        let v = PolicyCheckpoint::load(&dir.join("adam_v.ckpt"))?;
        Ok(Self {
            theta: PolicyCheckpoint::load(&dir.join("theta.ckpt"))?,
            theta_old: PolicyCheckpoint::load(&dir.join("theta_old.ckpt"))?,
            reference: PolicyCheckpoint::load(&dir.join("ref.ckpt"))?,
            adam: AdamState {
                m: m.params,
                v: v.params,
                t: header.adam_t,
            },
            step: header.step,
        })
    }
}

pub struct StepOutput {
    pub metrics: StepMetrics,
    pub groups: Vec<RolloutGroup>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// One rollout / mix / update / sync cycle on `tasks`.
pub fn train_step(
    state: &mut TrainerState,
    tasks: &[TaskInstance],
    bank: &DemoBank,
    cfg: &TrainConfig,
    family: &TaskFamily,
) -> Result<StepOutput> {
    if tasks.len() != cfg.batch_prompts {
        return Err(IcpoError::Size(format!(
            "expected {} prompts, got {}",
            cfg.batch_prompts,
            tasks.len()
        )));
    }
    let step = state.step;
    let vocab = &family.vocab;
    let rollout_cfg = cfg.rollout();
    let frozen = &state.theta_old;
    let mut groups: Vec<RolloutGroup> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            generate_group(
                frozen,
                t,
                bank,
                &rollout_cfg,
                vocab,
                group_seed(cfg.seed, step, i),
            )
        })
        .collect::<Result<_>>()?;

    let ief_candidates = groups.iter().filter(|g| g.ief_candidate.is_some()).count();
    let ief_candidates_correct = groups
        .iter()
        .filter_map(|g| g.ief_candidate.as_ref())
        .filter(|c| c.raw_reward >= 1.0)
        .count();
    let shaping = cfg.shaping();
    let mut bonuses = Vec::new();
    let mut bonus_clamped = false;
    if cfg.mode.uses_ief() {
        for (i, g) in groups.iter_mut().enumerate() {
            let out = mix_ief_into_group(g, vocab, step, &shaping, group_seed(cfg.seed, step, i));
            if out.accepted {
                bonuses.push(out.bonus);
                bonus_clamped |= out.clamped;
            }
        }
    }
    if bonus_clamped {
        warn!("step {step} lies beyond total_steps; bonus clamped to 0");
    }
    assign_advantages(&mut groups, cfg.eps_std)?;

    let obj = cfg.objective();
    let adam_cfg = cfg.adam();
    let chunk = cfg.batch_prompts.div_ceil(cfg.updates_per_batch);
    let mut diags: Vec<LossDiagnostics> = Vec::new();
    let mut grad_norm = 0.0;
    for mb in groups.chunks(chunk) {
        let out = icpo_loss(&state.theta, &state.reference, mb, &obj)?;
        grad_norm = optimizer_update(
            &mut state.theta.params,
            &out.grad,
            &mut state.adam,
            &adam_cfg,
        )?;
        state.theta.version += 1;
        diags.push(out.diagnostics);
    }
    if !state.theta.all_finite() {
        return Err(IcpoError::Numerical(format!(
            "non-finite parameters after step {step}"
        )));
    }
    state.theta_old = clone_frozen(&state.theta);
    state.step += 1;

    let pass = classify_pass_groups(&groups);
    let post = || groups.iter().flat_map(|g| &g.trajectories);
    let on_tokens = || {
        groups
            .iter()
            .flat_map(|g| g.trajectories.iter().chain(&g.displaced))
            .filter(|t| !t.mode.is_ief())
            .flat_map(|t| t.entropies.iter().copied())
    };
    let nd = diags.len() as f64;
    let avg = |f: fn(&LossDiagnostics) -> f64| diags.iter().map(f).sum::<f64>() / nd;
    let metrics = StepMetrics {
        step,
        mean_raw_reward: mean(post().map(|t| t.raw_reward)),
        mean_on_policy_reward: mean(groups.iter().flat_map(|g| g.on_policy_raw_rewards())),
        mean_shaped_reward: mean(post().map(|t| t.shaped_reward)),
        ief_candidates,
        ief_candidates_correct,
        accepted_ief_count: bonuses.len(),
        mean_bonus: mean(bonuses.iter().copied()),
        bonus_clamped,
        zero_pass: pass.zero,
        some_pass: pass.some,
        all_pass: pass.all,
        policy_entropy: mean(on_tokens()),
        kl_to_ref: diags[0].kl,
        mean_response_length: mean(post().map(|t| t.len() as f64)),
        loss_total: avg(|d| d.loss_total),
        loss_on: avg(|d| d.loss_on),
        loss_off: avg(|d| d.loss_off),
        kl: avg(|d| d.kl),
        entropy: avg(|d| d.entropy),
        clip_fraction: avg(|d| d.clip_fraction),
        z_tokens: diags.iter().map(|d| d.z_tokens).sum(),
        grad_norm,
        eval_accuracy: None,
    };
    Ok(StepOutput { metrics, groups })
}

/// Where a run writes its files.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
        }
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn rollouts(&self) -> PathBuf {
        self.dir.join("rollouts.jsonl")
    }

    pub fn state(&self) -> PathBuf {
        self.dir.join("state")
    }

    pub fn crash(&self) -> PathBuf {
        self.dir.join("crash")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
}

pub struct RunOutcome {
    pub final_checkpoint: PolicyCheckpoint,
    pub metrics: Vec<StepMetrics>,
}

/// How far a call to [`run_rl`] goes.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Continue from the state saved in the output directory, if any.
    pub resume: bool,
    /// Stop after this step; the annealing horizon stays `total_steps`.
    pub stop_after: Option<u64>,
}

/// Runs steps `1..=total_steps` from `init`, or continues a saved run when
/// resuming and `out` holds trainer state.
pub fn run_rl(
    exp: &Experiment,
    init: PolicyCheckpoint,
    out: Option<&Path>,
    opts: RunOptions,
) -> Result<RunOutcome> {
    let cfg = &exp.cfg;
    let resume = opts.resume;
    let last_step = opts
        .stop_after
        .map_or(cfg.total_steps, |s| s.min(cfg.total_steps));
    let paths = out.map(RunPaths::new);
    if let Some(p) = &paths {
        fs::create_dir_all(&p.dir).map_err(|e| io(&p.dir, e))?;
    }
    let resumed = resume
        && paths
            .as_ref()
            .is_some_and(|p| p.state().join("state.json").exists());
    let mut state = if resumed {
        let p = paths.as_ref().expect("resume requires an output directory");
        let s = TrainerState::load(&p.state())?;
        if s.theta.arch != cfg.arch() {
            return Err(IcpoError::Config(
                "saved state does not match the configured architecture".into(),
            ));
        }
        info!("resuming at step {}", s.step);
        s
    } else {
        TrainerState::new(init, 1)
    };
    let mut metrics: Vec<StepMetrics> = Vec::new();
    let mut sink = match &paths {
        Some(p) if resumed => {
            let sink = MetricsSink::resume(&p.metrics(), state.step - 1)?;
            metrics = crate::telemetry::read_metrics(&p.metrics())?;
            if p.rollouts().exists() {
                let kept: Vec<RolloutRecord> = read_jsonl::<RolloutRecord>(&p.rollouts())?
                    .into_iter()
                    .filter(|r| r.step < state.step)
                    .collect();
                fs::remove_file(p.rollouts()).map_err(|e| io(p.rollouts(), e))?;
                append_jsonl(&p.rollouts(), &kept)?;
            }
            Some(sink)
        }
        Some(p) => {
            let text = cfg.to_toml_string()?;
            fs::write(p.config(), text).map_err(|e| io(p.config(), e))?;
            if p.rollouts().exists() {
                fs::remove_file(p.rollouts()).map_err(|e| io(p.rollouts(), e))?;
            }
            Some(MetricsSink::create(&p.metrics())?)
        }
        None => None,
    };

    while state.step <= last_step {
        let step = state.step;
        let tasks = step_tasks(&exp.family, cfg, step);
        let before = paths.as_ref().map(|_| state.clone());
        let result =
            train_step(&mut state, &tasks, &exp.bank, cfg, &exp.family).and_then(|mut o| {
                if cfg.eval_every > 0 && step % cfg.eval_every == 0 && !exp.eval_tasks.is_empty() {
                    o.metrics.eval_accuracy = Some(zero_shot_accuracy(
                        &state.theta,
                        &exp.eval_tasks,
                        cfg.eval_temperature,
                        cfg.max_gen_len,
                        derive_seed(cfg.seed, &[stream::EVAL, step]),
                    )?);
                }
                if let (Some(p), true) = (&paths, cfg.dump_rollouts) {
                    let recs: Vec<RolloutRecord> = o
                        .groups
                        .iter()
                        .enumerate()
                        .flat_map(|(i, g)| RolloutRecord::from_group(step, i, g))
                        .collect();
                    append_jsonl(&p.rollouts(), &recs)?;
                }
                if let Some(s) = sink.as_mut() {
                    s.log_step(&o.metrics)?;
                }
                Ok(o)
            });
        let o = match result {
            Ok(o) => o,
            Err(e) => {
                if let (Some(p), Some(b)) = (&paths, before) {
                    if let Err(save_err) = b.save(&p.crash()) {
                        warn!("could not write crash checkpoint: {save_err}");
                    }
                }
                return Err(e);
            }
        };
        metrics.push(o.metrics);
        if let Some(p) = &paths {
            let due = cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0;
            if due || step == last_step {
                state.save(&p.state())?;
            }
        }
    }
    if let Some(p) = &paths {
        state.theta.save(&p.final_checkpoint())?;
    }
    Ok(RunOutcome {
        final_checkpoint: state.theta,
        metrics,
    })
}

/// Warm start followed by training.
pub fn run(cfg: &TrainConfig, out: Option<&Path>) -> Result<(WarmStartOutcome, RunOutcome)> {
    let exp = Experiment::new(cfg.clone())?;
    let ws = warm_start(cfg, &exp.family, &exp.bank, cfg.seed)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        ws.checkpoint.save(&dir.join("warm_start.ckpt"))?;
    }
    let r = run_rl(&exp, ws.checkpoint.clone(), out, RunOptions::default())?;
    Ok((ws, r))
}

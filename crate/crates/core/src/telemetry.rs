//! Step metrics, the JSONL metrics sink, pass-group classification and
//! paired 0-shot / k-shot evaluation.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io, IcpoError, Result};
use crate::policy::PolicyCheckpoint;
use crate::rng::{derive_seed, stream};
use crate::rollout::{sample_trajectory, RolloutGroup};
use crate::task::{
    build_expert_context, build_query_context, sample_demonstrations, verify, DemoBank,
    TaskInstance, Token, Vocab,
};

/// One record per training step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    /// Mean raw reward of the post-mix training groups.
    pub mean_raw_reward: f64,
    /// Mean raw reward of all on-policy rollouts, before any replacement.
    pub mean_on_policy_reward: f64,
    pub mean_shaped_reward: f64,
    pub ief_candidates: usize,
    pub ief_candidates_correct: usize,
    pub accepted_ief_count: usize,
    /// Mean `shaped - raw` over accepted candidates; 0 when none.
    pub mean_bonus: f64,
    pub bonus_clamped: bool,
    pub zero_pass: usize,
    pub some_pass: usize,
    pub all_pass: usize,
    /// Mean sampling entropy over on-policy tokens.
    pub policy_entropy: f64,
    pub kl_to_ref: f64,
    pub mean_response_length: f64,
    pub loss_total: f64,
    pub loss_on: f64,
    pub loss_off: f64,
    pub kl: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub z_tokens: usize,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
}

/// Append-only JSONL writer, flushed after every record.
pub struct MetricsSink {
    path: PathBuf,
    file: File,
    last_step: Option<u64>,
}

impl MetricsSink {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            last_step: None,
        })
    }

    /// Reopens an existing file, dropping any records after `keep_through`.
    pub fn resume(path: &Path, keep_through: u64) -> Result<Self> {
        let kept: Vec<StepMetrics> = if path.exists() {
            read_metrics(path)?
                .into_iter()
                .filter(|m| m.step <= keep_through)
                .collect()
        } else {
            Vec::new()
        };
        let mut sink = Self::create(path)?;
        for m in &kept {
            sink.log_step(m)?;
        }
        Ok(sink)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn log_step(&mut self, m: &StepMetrics) -> Result<()> {
        if let Some(last) = self.last_step {
            if m.step <= last {
                return Err(IcpoError::Precondition(format!(
                    "metrics step {} does not follow {last}",
                    m.step
                )));
            }
        }
        let line = serde_json::to_string(m).map_err(|e| IcpoError::Serde(e.to_string()))?;
        writeln!(self.file, "{line}")
            .and_then(|_| self.file.flush())
            .map_err(|e| io(&self.path, e))?;
        self.last_step = Some(m.step);
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    read_jsonl(path)
}

/// Parses every non-empty line of a JSONL file.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| io(path, e))?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|(i, line)| {
            let line = line.map_err(|e| io(path, e))?;
            serde_json::from_str(&line).map_err(|e| IcpoError::Format {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Appends serializable records as JSONL.
pub fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io(path, e))?;
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).map_err(|e| IcpoError::Serde(e.to_string()))?);
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| io(path, e))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounts {
    pub zero: usize,
    pub some: usize,
    pub all: usize,
}

/// Classifies each group by the raw rewards of its on-policy rollouts.
pub fn classify_pass_groups(groups: &[RolloutGroup]) -> PassCounts {
    let mut c = PassCounts::default();
    for g in groups {
        let r = g.on_policy_raw_rewards();
        let n_pass = r.iter().filter(|&&x| x >= 1.0).count();
        if n_pass == 0 {
            c.zero += 1;
        } else if n_pass == r.len() {
            c.all += 1;
        } else {
            c.some += 1;
        }
    }
    c
}

/// Mean over unordered pairs of `levenshtein(a, b) / max(|a|, |b|)`.
pub fn pairwise_diversity(seqs: &[&[Token]]) -> Result<f64> {
    if seqs.len() < 2 {
        return Err(IcpoError::Size(format!(
            "diversity needs at least 2 sequences, got {}",
            seqs.len()
        )));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..seqs.len() {
        for j in i + 1..seqs.len() {
            total += normalized_edit_distance(seqs[i], seqs[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

pub fn normalized_edit_distance(a: &[Token], b: &[Token]) -> f64 {
    let m = a.len().max(b.len());
    if m == 0 {
        return 0.0;
    }
    strsim::generic_levenshtein(&a.to_vec(), &b.to_vec()) as f64 / m as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub temperature: f64,
    /// Temperature of the demonstration-free resample used as the baseline.
    pub baseline_temperature: f64,
    pub max_gen_len: usize,
}

/// Results for one evaluation seed.
///
/// Each task gets an anchor 0-shot sample, a second 0-shot sample and a
/// k-shot sample. Flip rates and diversity compare each of the latter two
/// against the anchor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub accuracy_0shot: f64,
    pub accuracy_kshot: f64,
    pub flip_to_correct_rate: f64,
    pub flip_to_wrong_rate: f64,
    pub unchanged_rate: f64,
    pub mean_pairwise_edit_distance: f64,
    pub baseline_accuracy: f64,
    pub baseline_flip_to_correct_rate: f64,
    pub baseline_flip_to_wrong_rate: f64,
    pub baseline_mean_pairwise_edit_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_tasks: usize,
    pub k: usize,
    pub temperature: f64,
    pub accuracy_0shot: f64,
    pub accuracy_kshot: f64,
    pub flip_to_correct_rate: f64,
    pub flip_to_wrong_rate: f64,
    pub mean_pairwise_edit_distance: f64,
    pub baseline_accuracy: f64,
    pub baseline_flip_to_correct_rate: f64,
    pub baseline_mean_pairwise_edit_distance: f64,
    pub per_seed: Vec<SeedReport>,
}

struct TaskOutcome {
    anchor: bool,
    baseline: bool,
    kshot: bool,
    d_baseline: f64,
    d_kshot: f64,
}

fn eval_task(
    ckpt: &PolicyCheckpoint,
    task: &TaskInstance,
    bank: &DemoBank,
    cfg: &EvalConfig,
    vocab: &Vocab,
    seed: u64,
) -> Result<TaskOutcome> {
    let prompt = build_query_context(&task.query, vocab);
    let sample = |ctx: &[Token], temp: f64, which: u64| {
        sample_trajectory(
            ckpt,
            ctx,
            temp,
            cfg.max_gen_len,
            vocab.eos(),
            derive_seed(seed, &[which]),
        )
    };
    let anchor = sample(&prompt, cfg.temperature, 0)?;
    let baseline = sample(&prompt, cfg.baseline_temperature, 1)?;
    let demos = sample_demonstrations(
        bank,
        task.rule_id,
        cfg.k,
        derive_seed(seed, &[2]),
        Some(&task.query),
    )?;
    let ctx = build_expert_context(&demos, &task.query, vocab, ckpt.arch.max_context)?;
    let kshot = sample(&ctx, cfg.temperature, 3)?;
    Ok(TaskOutcome {
        anchor: verify(task, &anchor.generated, vocab),
        baseline: verify(task, &baseline.generated, vocab),
        kshot: verify(task, &kshot.generated, vocab),
        d_baseline: normalized_edit_distance(&anchor.generated, &baseline.generated),
        d_kshot: normalized_edit_distance(&anchor.generated, &kshot.generated),
    })
}

/// Paired 0-shot / k-shot evaluation averaged over `seeds`.
pub fn evaluate(
    ckpt: &PolicyCheckpoint,
    tasks: &[TaskInstance],
    bank: &DemoBank,
    cfg: &EvalConfig,
    seeds: &[u64],
) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(IcpoError::Size("evaluation needs at least one task".into()));
    }
    if seeds.is_empty() {
        return Err(IcpoError::Size("evaluation needs at least one seed".into()));
    }
    let vocab = Vocab::new(ckpt.arch.vocab)?;
    let per_seed = seeds
        .iter()
        .map(|&seed| {
            let outcomes: Vec<TaskOutcome> = tasks
                .par_iter()
                .enumerate()
                .map(|(i, t)| {
                    eval_task(
                        ckpt,
                        t,
                        bank,
                        cfg,
                        &vocab,
                        derive_seed(seed, &[stream::EVAL, i as u64]),
                    )
                })
                .collect::<Result<_>>()?;
            Ok(seed_report(seed, &outcomes))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean =
        |f: fn(&SeedReport) -> f64| per_seed.iter().map(f).sum::<f64>() / per_seed.len() as f64;
    Ok(EvalReport {
        n_tasks: tasks.len(),
        k: cfg.k,
        temperature: cfg.temperature,
        accuracy_0shot: mean(|s| s.accuracy_0shot),
        accuracy_kshot: mean(|s| s.accuracy_kshot),
        flip_to_correct_rate: mean(|s| s.flip_to_correct_rate),
        flip_to_wrong_rate: mean(|s| s.flip_to_wrong_rate),
        mean_pairwise_edit_distance: mean(|s| s.mean_pairwise_edit_distance),
        baseline_accuracy: mean(|s| s.baseline_accuracy),
        baseline_flip_to_correct_rate: mean(|s| s.baseline_flip_to_correct_rate),
        baseline_mean_pairwise_edit_distance: mean(|s| s.baseline_mean_pairwise_edit_distance),
        per_seed,
    })
}

fn seed_report(seed: u64, o: &[TaskOutcome]) -> SeedReport {
    let n = o.len() as f64;
    let frac = |f: &dyn Fn(&TaskOutcome) -> bool| o.iter().filter(|x| f(x)).count() as f64 / n;
    let mean = |f: &dyn Fn(&TaskOutcome) -> f64| o.iter().map(f).sum::<f64>() / n;
    SeedReport {
        seed,
        accuracy_0shot: frac(&|x| x.anchor),
        accuracy_kshot: frac(&|x| x.kshot),
        flip_to_correct_rate: frac(&|x| !x.anchor && x.kshot),
        flip_to_wrong_rate: frac(&|x| x.anchor && !x.kshot),
        unchanged_rate: frac(&|x| x.anchor == x.kshot),
        mean_pairwise_edit_distance: mean(&|x| x.d_kshot),
        baseline_accuracy: frac(&|x| x.baseline),
        baseline_flip_to_correct_rate: frac(&|x| !x.anchor && x.baseline),
        baseline_flip_to_wrong_rate: frac(&|x| x.anchor && !x.baseline),
        baseline_mean_pairwise_edit_distance: mean(&|x| x.d_baseline),
    }
}

/// Demonstration-free accuracy of one sample per task.
pub fn zero_shot_accuracy(
    ckpt: &PolicyCheckpoint,
    tasks: &[TaskInstance],
    temperature: f64,
    max_gen_len: usize,
    seed: u64,
) -> Result<f64> {
    if tasks.is_empty() {
        return Err(IcpoError::Size("evaluation needs at least one task".into()));
    }
    let vocab = Vocab::new(ckpt.arch.vocab)?;
    let hits: Vec<bool> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let prompt = build_query_context(&t.query, &vocab);
            let s = sample_trajectory(
                ckpt,
                &prompt,
                temperature,
                max_gen_len,
                vocab.eos(),
                derive_seed(seed, &[stream::EVAL, i as u64, 0]),
            )?;
            Ok(verify(t, &s.generated, &vocab))
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / tasks.len() as f64)
}

/// Aggregate statistics over a rollout dump.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutAnalysis {
    pub steps: usize,
    pub groups: usize,
    pub on_policy_accuracy: f64,
    /// Mean within-group pairwise diversity of on-policy rollouts.
    pub on_policy_diversity: f64,
    pub ief_candidates: usize,
    pub ief_accuracy: f64,
    /// Mean normalized distance from each candidate to its group's on-policy
    /// rollouts.
    pub ief_distance_to_on_policy: f64,
    pub accepted: usize,
    pub zero_pass_groups: usize,
    /// Zero-pass groups whose candidate was correct.
    pub zero_pass_rescued: usize,
    /// Expert-conditioned trajectories in a training group with a reward
    /// below 1. Always 0 when reject sampling works.
    pub unsound_ief_in_group: usize,
}

/// Groups dump records by `(step, prompt)` and summarizes them.
pub fn analyze_rollouts(records: &[crate::rollout::RolloutRecord]) -> Result<RolloutAnalysis> {
    use std::collections::BTreeMap;
    if records.is_empty() {
        return Err(IcpoError::Size("empty rollout dump".into()));
    }
    let mut by_group: BTreeMap<(u64, usize), Vec<&crate::rollout::RolloutRecord>> = BTreeMap::new();
    for r in records {
        by_group
            .entry((r.step, r.prompt_index))
            .or_default()
            .push(r);
    }
    let mut a = RolloutAnalysis {
        steps: by_group
            .keys()
            .map(|k| k.0)
            .collect::<std::collections::BTreeSet<_>>()
            .len(),
        groups: by_group.len(),
        ..Default::default()
    };
    let (mut on_hits, mut on_n) = (0usize, 0usize);
    let (mut div_sum, mut div_n) = (0.0, 0usize);
    let (mut ief_hits, mut dist_sum) = (0usize, 0.0);
    for recs in by_group.values() {
        let on: Vec<_> = recs.iter().filter(|r| r.mode == "on_policy").collect();
        let ief: Vec<_> = recs.iter().filter(|r| r.mode == "ief").collect();
        on_n += on.len();
        let hits = on.iter().filter(|r| r.raw_reward >= 1.0).count();
        on_hits += hits;
        if on.len() >= 2 {
            let seqs: Vec<&[Token]> = on.iter().map(|r| r.generated.as_slice()).collect();
            div_sum += pairwise_diversity(&seqs)?;
            div_n += 1;
        }
        for c in &ief {
            a.ief_candidates += 1;
            let ok = c.raw_reward >= 1.0;
            ief_hits += ok as usize;
            if c.in_group {
                a.accepted += 1;
                if !ok {
                    a.unsound_ief_in_group += 1;
                }
            }
            if !on.is_empty() {
                dist_sum += on
                    .iter()
                    .map(|r| normalized_edit_distance(&c.generated, &r.generated))
                    .sum::<f64>()
                    / on.len() as f64;
            }
            if hits == 0 && ok {
                a.zero_pass_rescued += 1;
            }
        }
        if hits == 0 {
            a.zero_pass_groups += 1;
        }
    }
    a.on_policy_accuracy = on_hits as f64 / on_n.max(1) as f64;
    a.on_policy_diversity = div_sum / div_n.max(1) as f64;
    a.ief_accuracy = ief_hits as f64 / a.ief_candidates.max(1) as f64;
    a.ief_distance_to_on_policy = dist_sum / a.ief_candidates.max(1) as f64;
    Ok(a)
}

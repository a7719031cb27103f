//! `icpo`: warm start, train, evaluate, compare and analyze runs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use icpo_core::telemetry::{analyze_rollouts, read_jsonl, read_metrics};
use icpo_core::trainer::{held_out_tasks, run_rl, warm_start, RunOptions};
use icpo_core::{
    Experiment, IcpoError, Mode, PolicyCheckpoint, RolloutRecord, StepMetrics, TrainConfig,
};

/// Default output root when `--out` is not given.
const OUT_ENV: &str = "ICPO_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "icpo",
    version,
    about = "In-context steered policy optimization laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised warm start; writes warm_start.ckpt and warm_start.json.
    Warmstart(RunArgs),
    /// Warm start (or --init) followed by mixed-policy training.
    Train(TrainArgs),
    /// Paired 0-shot / k-shot evaluation of a checkpoint on held-out tasks.
    Eval(EvalArgs),
    /// Runs several modes from the same warm start and prints reward curves.
    Compare(CompareArgs),
    /// Diversity, accuracy and reject-sampling statistics of a rollout dump.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to $ICPO_OUT_DIR/<command>-<mode>-<seed>.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    mode: Option<Mode>,
    /// Start from this checkpoint instead of running a warm start.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Continue from the state saved in the output directory.
    #[arg(long)]
    resume: bool,
    /// Stop after this step even if total_steps is larger; the annealing
    /// schedule is unchanged.
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    /// Comma-separated evaluation seeds.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    #[arg(long)]
    tasks: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "grpo,icpo")]
    modes: Vec<Mode>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// A rollouts.jsonl dump.
    #[arg(long)]
    rollouts: PathBuf,
    /// Optional metrics.jsonl to summarize alongside.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

fn load_config(args: &RunArgs) -> Result<TrainConfig, IcpoError> {
    let mut cfg = TrainConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(args: &RunArgs, label: &str, cfg: &TrainConfig) -> PathBuf {
    args.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| "runs".into());
        root.join(format!("{label}-{}", cfg.seed))
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), IcpoError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| IcpoError::Serde(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| IcpoError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn init_checkpoint(
    exp: &Experiment,
    init: Option<&Path>,
    out: &Path,
) -> Result<PolicyCheckpoint, IcpoError> {
    if let Some(p) = init {
        let ck = PolicyCheckpoint::load(p)?;
        if ck.arch != exp.cfg.arch() {
            return Err(IcpoError::Config(format!(
                "{} was saved with a different architecture",
                p.display()
            )));
        }
        return Ok(ck);
    }
    std::fs::create_dir_all(out).map_err(|e| IcpoError::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let ws = warm_start(&exp.cfg, &exp.family, &exp.bank, exp.cfg.seed)?;
    eprintln!(
        "warm start: {} steps, 0-shot {:.3}, {}-shot {:.3}",
        ws.steps, ws.accuracy_0shot, exp.cfg.k_demos, ws.accuracy_kshot
    );
    ws.checkpoint.save(&out.join("warm_start.ckpt"))?;
    write_json(&out.join("warm_start.json"), &ws.history)?;
    Ok(ws.checkpoint)
}

fn cmd_warmstart(args: &RunArgs) -> Result<(), IcpoError> {
    let cfg = load_config(args)?;
    let out = out_dir(args, "warmstart", &cfg);
    let exp = Experiment::new(cfg)?;
    init_checkpoint(&exp, None, &out)?;
    println!("{}", out.join("warm_start.ckpt").display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<(), IcpoError> {
    let mut cfg = load_config(&args.run)?;
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    let out = out_dir(&args.run, &format!("train-{}", cfg.mode), &cfg);
    let exp = Experiment::new(cfg)?;
    let init = if args.resume && out.join("state").join("state.json").exists() {
        // replaced by the saved state inside run_rl
        PolicyCheckpoint::zeros(exp.cfg.arch())?
    } else {
        init_checkpoint(&exp, args.init.as_deref(), &out)?
    };
    let opts = RunOptions {
        resume: args.resume,
        stop_after: args.stop_after,
    };
    let r = run_rl(&exp, init, Some(&out), opts)?;
    if let Some(last) = r.metrics.last() {
        eprintln!(
            "step {}: mean reward {:.3}, zero-pass {}",
            last.step, last.mean_raw_reward, last.zero_pass
        );
    }
    println!("{}", out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), IcpoError> {
    let cfg = TrainConfig::load(&args.config)?;
    let exp = Experiment::new(cfg)?;
    let ckpt = PolicyCheckpoint::load(&args.ckpt)?;
    let mut ecfg = exp.cfg.eval();
    if let Some(k) = args.k {
        ecfg.k = k;
    }
    let n = args.tasks.unwrap_or(exp.cfg.eval_tasks);
    let tasks = held_out_tasks(&exp.family, n, exp.cfg.seed);
    let report = icpo_core::telemetry::evaluate(&ckpt, &tasks, &exp.bank, &ecfg, &args.seeds)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| IcpoError::Serde(e.to_string()))?
    );
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<(), IcpoError> {
    let cfg = load_config(&args.run)?;
    if args.modes.len() < 2 {
        return Err(IcpoError::Config("compare needs at least two modes".into()));
    }
    let out = out_dir(&args.run, "compare", &cfg);
    let exp = Experiment::new(cfg.clone())?;
    let init = init_checkpoint(&exp, args.init.as_deref(), &out)?;
    let mut curves: Vec<Vec<StepMetrics>> = Vec::new();
    for &m in &args.modes {
        let mut c = cfg.clone();
        c.mode = m;
        let e = Experiment::new(c)?;
        let r = run_rl(
            &e,
            init.clone(),
            Some(&out.join(m.as_str())),
            RunOptions::default(),
        )?;
        curves.push(r.metrics);
    }
    print!("{}", compare_table(&args.modes, &curves));
    Ok(())
}

/// One row per step with each mode's mean reward and Zero-Pass count.
fn compare_table(modes: &[Mode], curves: &[Vec<StepMetrics>]) -> String {
    let mut s = String::from("step");
    for m in modes {
        let _ = write!(s, "\t{m}_reward\t{m}_zero_pass");
    }
    s.push('\n');
    let n = curves.iter().map(Vec::len).min().unwrap_or(0);
    for i in 0..n {
        let _ = write!(s, "{}", curves[0][i].step);
        for c in curves {
            let _ = write!(s, "\t{:.6}\t{}", c[i].mean_raw_reward, c[i].zero_pass);
        }
        s.push('\n');
    }
    s
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<(), IcpoError> {
    let records: Vec<RolloutRecord> = read_jsonl(&args.rollouts)?;
    let a = analyze_rollouts(&records)?;
    let mut v = serde_json::to_value(&a).map_err(|e| IcpoError::Serde(e.to_string()))?;
    if let Some(p) = &args.metrics {
        let m = read_metrics(p)?;
        let tail = &m[m.len().saturating_sub(100)..];
        let mean = tail.iter().map(|x| x.mean_raw_reward).sum::<f64>() / tail.len().max(1) as f64;
        v["final_100_mean_reward"] = serde_json::json!(mean);
        v["final_zero_pass"] = serde_json::json!(m.last().map(|x| x.zero_pass));
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&v).map_err(|e| IcpoError::Serde(e.to_string()))?
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Warmstart(a) => cmd_warmstart(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Analyze(a) => cmd_analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compare_table_has_one_row_per_step() {
        let curve = |r: f64| {
            (1..=3)
                .map(|s| StepMetrics {
                    step: s,
                    mean_raw_reward: r,
                    zero_pass: s as usize,
                    ..Default::default()
                })
                .collect::<Vec<_>>()
        };
        let t = compare_table(&[Mode::Grpo, Mode::Icpo], &[curve(0.25), curve(0.5)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(
            lines[0],
            "step\tgrpo_reward\tgrpo_zero_pass\ticpo_reward\ticpo_zero_pass"
        );
        assert_eq!(lines[2], "2\t0.250000\t2\t0.500000\t2");
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use hsp::analysis;
use hsp::env::{EnvKind, KeyDoor, PointGather};
use hsp::policies::{AlicePolicy, BobPolicy, GoalEncoder};
use hsp::training::runner::{self, read_run_log};
use hsp::training::trainer::TaskTrainer;
use hsp::{Phase, RunConfig};

/// Hierarchical self-play: pre-train a goal-conditioned agent by asymmetric
/// self-play, then train a goal-emitting controller on a target task.
#[derive(Debug, Parser)]
#[command(name = "hsp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Self-play pre-training of Alice, Bob and the goal encoder.
    Pretrain(RunArgs),
    /// Target-task training (hsp, reinforce or selfplay method).
    Train(RunArgs),
    /// Mean and std of the episode reward of a train checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Goal embeddings phi(s) of a pre-trained encoder as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Maze seed (KeyDoor) or self-play seed (PointGather).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Self-play games to embed (PointGather).
        #[arg(long, default_value_t = 500)]
        games: usize,
        #[arg(long, default_value = "embeddings.csv")]
        out: PathBuf,
    },
    /// Bob's trajectories under fixed goal vectors (PointGather).
    GoalRollouts {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Goal vectors, e.g. "1.5,0;-1,2". Overrides --embeddings.
        #[arg(long)]
        goals: Option<String>,
        /// Pick well-separated goals from an embedding export.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        n_goals: usize,
        #[arg(long, default_value_t = 10)]
        per_goal: usize,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "goal_rollouts")]
        out: PathBuf,
    },
    /// Self-play statistics and the final goal scatter from a run log.
    SelfplayReport {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value = "selfplay_report")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run this single seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pre-training output to load Bob and the encoder from.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Continue each seed from its checkpoint under the output directory.
    #[arg(long)]
    resume: bool,
}

/// Errors split by exit code: bad input (1) or a failure while running (2).
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<hsp::Error> for Failure {
    fn from(e: hsp::Error) -> Self {
        match e {
            hsp::Error::Config(_) | hsp::Error::Usage(_) => Failure::Usage(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn load_config(args: &RunArgs, phase: Phase) -> Outcome<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path).map_err(|e| usage(anyhow!(e).context(format!("config {}", path.display()))))?,
        None => RunConfig::from_toml_str("")?,
    };
    cfg.phase = phase;
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(p) = &args.pretrained {
        if phase == Phase::Pretrain {
            return Err(usage(anyhow!("--pretrained only applies to train")));
        }
        cfg.pretrained = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: RunArgs, phase: Phase) -> Outcome {
    let cfg = load_config(&args, phase)?;
    let outcomes = if args.resume {
        let mut v = vec![];
        for &seed in &cfg.seeds {
            v.push(runner::resume_seed(&cfg, seed)?);
        }
        std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
        runner::write_aggregate(&cfg.out_dir.join("aggregate.csv"), &runner::aggregate(&v))?;
        v
    } else {
        runner::run_all(&cfg)?
    };
    for o in &outcomes {
        let s = &o.summary;
        match (&s.eval, &s.final_selfplay) {
            (Some(e), _) => println!(
                "seed {}: {} epochs, {} env steps, eval reward {:.3} +- {:.3}",
                s.seed, s.epochs, s.env_steps, e.mean_reward, e.std_reward
            ),
            (None, Some(sp)) => println!(
                "seed {}: {} epochs, {} env steps, bob success {:.3}, key {:.3}, door {:.3}",
                s.seed, s.epochs, s.env_steps, sp.bob_success_rate, sp.key_prob, sp.door_prob
            ),
            (None, None) => println!("seed {}: {} epochs, {} env steps", s.seed, s.epochs, s.env_steps),
        }
    }
    println!("outputs in {}", cfg.out_dir.display());
    Ok(())
}

fn checkpoint_config(dir: &Path) -> Outcome<RunConfig> {
    let path = dir.join("config.toml");
    if !path.is_file() {
        return Err(usage(anyhow!("no checkpoint at {} (missing config.toml)", dir.display())));
    }
    Ok(RunConfig::load(&path)?)
}

fn eval(checkpoint: &Path, episodes: usize, seed: u64) -> Outcome {
    let cfg = checkpoint_config(checkpoint)?;
    if cfg.phase != Phase::Train {
        return Err(usage(anyhow!("eval needs a train checkpoint, {} is from pre-training", checkpoint.display())));
    }
    let summary = match cfg.env {
        EnvKind::KeyDoor => TaskTrainer::resume(KeyDoor::new(cfg.keydoor.clone())?, cfg, checkpoint)?.evaluate(episodes, seed)?,
        EnvKind::PointGather => {
            TaskTrainer::resume(PointGather::new(cfg.pointgather.clone())?, cfg, checkpoint)?.evaluate(episodes, seed)?
        }
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).context("encoding evaluation summary")?
    );
    Ok(())
}

fn export_embeddings(checkpoint: &Path, seed: u64, games: usize, out: &Path) -> Outcome {
    let cfg = checkpoint_config(checkpoint)?;
    let encoder = GoalEncoder::load(&checkpoint.join("encoder.json"))?;
    let export = match cfg.env {
        EnvKind::KeyDoor => analysis::keydoor_embeddings(&KeyDoor::new(cfg.keydoor.clone())?, &encoder, seed)?,
        EnvKind::PointGather => {
            let alice = AlicePolicy::load(&checkpoint.join("alice.json"))?;
            let bob = BobPolicy::load(&checkpoint.join("bob.json"))?;
            let env = PointGather::new(cfg.pointgather.clone())?;
            analysis::pointgather_embeddings(&env, &alice, &bob, &encoder, &cfg.selfplay, games, seed)?
        }
    };
    for f in &export.failures {
        warn!("skipped state: {f}");
    }
    analysis::write_embeddings_csv(out, &export.rows, encoder.k())?;
    println!("{} rows written to {}", export.rows.len(), out.display());
    Ok(())
}

fn parse_goals(text: &str, k: usize) -> Outcome<Vec<Vec<f64>>> {
    text.split(';')
        .filter(|g| !g.trim().is_empty())
        .map(|g| {
            let v = g
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| usage(anyhow!("--goals: `{g}`: {e}")))?;
            if v.len() != k {
                return Err(usage(anyhow!("--goals: `{g}` has {} values, the encoder has K = {k}", v.len())));
            }
            Ok(v)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn goal_rollouts(
    checkpoint: &Path,
    goals: Option<&str>,
    embeddings: Option<&Path>,
    n_goals: usize,
    per_goal: usize,
    steps: usize,
    seed: u64,
    out: &Path,
) -> Outcome {
    let cfg = checkpoint_config(checkpoint)?;
    if cfg.env != EnvKind::PointGather {
        return Err(usage(anyhow!("goal-rollouts needs a PointGather checkpoint")));
    }
    let bob = BobPolicy::load(&checkpoint.join("bob.json"))?;
    let goals = match (goals, embeddings) {
        (Some(text), _) => parse_goals(text, bob.k())?,
        (None, Some(path)) => analysis::pick_goals(&analysis::read_embeddings_csv(path)?, n_goals),
        (None, None) => return Err(usage(anyhow!("pass --goals or --embeddings"))),
    };
    let env = PointGather::new(cfg.pointgather.clone())?;
    let result = analysis::goal_rollouts(&env, &bob, &goals, per_goal, steps, seed)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    analysis::write_traces_jsonl(&out.join("traces.jsonl"), &result.traces)?;
    analysis::write_goal_summaries_csv(&out.join("goals.csv"), &result.summaries)?;
    for s in &result.summaries {
        println!(
            "goal {} {:?}: mean displacement ({:.3}, {:.3}), |d| {:.3}, angular dispersion {:.3}",
            s.goal_index, s.goal, s.mean_dx, s.mean_dy, s.mean_displacement, s.angular_dispersion
        );
    }
    Ok(())
}

fn selfplay_report(log: &Path, out: &Path) -> Outcome {
    if !log.is_file() {
        return Err(usage(anyhow!("run log {} does not exist", log.display())));
    }
    let parsed = read_run_log(log)?;
    if parsed.skipped > 0 {
        warn!("skipped {} unreadable line(s) in {}", parsed.skipped, log.display());
    }
    let report = analysis::selfplay_report(&parsed.records);
    if report.rows.is_empty() {
        warn!("no pre-training records in {}", log.display());
    }
    analysis::write_selfplay_report(out, &report)?;
    info!("report written to {}", out.display());
    println!(
        "{} epochs, {} final-epoch goals, {} of 8 octants occupied",
        report.rows.len(),
        report.goals.len(),
        report.occupied_octants()
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Outcome {
    match cli.command {
        Command::Pretrain(args) => run(args, Phase::Pretrain),
        Command::Train(args) => run(args, Phase::Train),
        Command::Eval {
            checkpoint,
            episodes,
            seed,
        } => eval(&checkpoint, episodes, seed),
        Command::ExportEmbeddings {
            checkpoint,
            seed,
            games,
            out,
        } => export_embeddings(&checkpoint, seed, games, &out),
        Command::GoalRollouts {
            checkpoint,
            goals,
            embeddings,
            n_goals,
            per_goal,
            steps,
            seed,
            out,
        } => goal_rollouts(
            &checkpoint,
            goals.as_deref(),
            embeddings.as_deref(),
            n_goals,
            per_goal,
            steps,
            seed,
            &out,
        ),
        Command::SelfplayReport { log, out } => selfplay_report(&log, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HSP_LOG_LEVEL", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

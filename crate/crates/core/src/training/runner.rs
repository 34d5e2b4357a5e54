//! Drives whole runs: one directory per seed holding the run log, the latest
//! checkpoint and a summary, plus an aggregate CSV across seeds.
//!
//! Layout under `out_dir`:
//!
//! ```text
//! aggregate.csv
//! seed-<n>/run_log.jsonl
//! seed-<n>/summary.json
//! seed-<n>/checkpoint/{alice,bob,encoder,charlie,flat}.json, trainer.json, config.toml
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::loss::LossParts;
use super::trainer::{load_pretrained, EpochReport, EvalSummary, Pretrainer, TaskTrainer};
use crate::config::{Method, Phase, RunConfig};
use crate::env::{EnvKind, Environment, KeyDoor, PointGather, TaskInfo};
use crate::error::{Error, Result};
use crate::policies::{BobPolicy, GoalEncoder};
use crate::selfplay::SelfPlayStats;

pub const RUN_LOG_VERSION: u32 = 1;
pub const AGGREGATE_VERSION: u32 = 1;

/// One line of `run_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub version: u32,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    pub seed: u64,
    pub epoch: usize,
    pub updates: usize,
    pub episodes: usize,
    /// Environment steps of this phase; pre-training steps never count
    /// towards a train run.
    pub env_steps_cumulative: u64,
    pub mean_reward: Option<f64>,
    pub success_rate: Option<f64>,
    pub bob_success_rate: Option<f64>,
    pub losses: BTreeMap<String, LossParts>,
    pub task_stats: Option<SelfPlayStats>,
    pub rejected_updates: Vec<String>,
    /// Every task Alice proposed in the final pre-training epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_tasks: Option<Vec<TaskInfo>>,
}

impl LogRecord {
    pub fn from_report(phase: Phase, method: Option<Method>, seed: u64, report: &EpochReport, last: bool) -> Self {
        LogRecord {
            version: RUN_LOG_VERSION,
            phase,
            method,
            seed,
            epoch: report.epoch,
            updates: report.updates,
            episodes: report.episodes,
            env_steps_cumulative: report.env_steps,
            mean_reward: report.mean_reward,
            success_rate: report.success_rate,
            bob_success_rate: report.selfplay.map(|s| s.bob_success_rate),
            losses: report.losses.clone(),
            task_stats: report.selfplay,
            rejected_updates: report.rejected_updates.clone(),
            final_tasks: (last && phase == Phase::Pretrain).then(|| report.tasks.clone()),
        }
    }
}

/// Result of one seed's run, also written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    pub epochs: usize,
    pub env_steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_selfplay: Option<SelfPlayStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSummary>,
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub summary: SeedSummary,
    pub records: Vec<LogRecord>,
    pub dir: PathBuf,
}

impl SeedOutcome {
    pub fn checkpoint_dir(&self) -> PathBuf {
        self.dir.join("checkpoint")
    }
}

pub fn seed_dir(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("seed-{seed}"))
}

/// Appends records to a run log, flushing after each one.
struct LogWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl LogWriter {
    fn create(path: &Path, keep: &[LogRecord]) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = LogWriter {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        for r in keep {
            w.write(r)?;
        }
        Ok(w)
    }

    fn write(&mut self, record: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::format("run log record", e))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Parsed run log. Lines that fail to parse (for example a line truncated by
/// an interrupted run) are counted and skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    pub skipped: usize,
}

pub fn read_run_log(path: &Path) -> Result<RunLog> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut log = RunLog::default();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LogRecord>(&line) {
            Ok(r) if r.version == RUN_LOG_VERSION => log.records.push(r),
            Ok(r) => {
                return Err(Error::format(
                    "run log",
                    format!("unsupported record version {} (expected {RUN_LOG_VERSION})", r.version),
                ))
            }
            Err(_) => log.skipped += 1,
        }
    }
    Ok(log)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format("summary", e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Locates Bob and the encoder for `seed` under a pre-training output: a
/// run root (`seed-<n>/checkpoint`), a seed directory (`checkpoint`) or a
/// checkpoint directory itself.
pub fn resolve_pretrained(dir: &Path, seed: u64) -> Result<PathBuf> {
    let candidates = [
        seed_dir(dir, seed).join("checkpoint"),
        dir.join("checkpoint"),
        dir.to_path_buf(),
    ];
    candidates
        .into_iter()
        .find(|c| c.join("bob.json").is_file() && c.join("encoder.json").is_file())
        .ok_or_else(|| {
            Error::Config(format!(
                "field `pretrained`: no bob.json and encoder.json for seed {seed} under {}",
                dir.display()
            ))
        })
}

fn pretrained_for(cfg: &RunConfig, seed: u64) -> Result<Option<(BobPolicy, GoalEncoder)>> {
    if cfg.method == Method::Reinforce {
        return Ok(None);
    }
    match &cfg.pretrained {
        Some(dir) => {
            let ckpt = resolve_pretrained(dir, seed)?;
            info!("seed {seed}: loading pre-trained Bob from {}", ckpt.display());
            Ok(Some(load_pretrained(&ckpt)?))
        }
        None => {
            warn!("from-scratch ablation: no pre-trained checkpoint given, Bob starts from random weights");
            Ok(None)
        }
    }
}

enum Trainer<E: Environment> {
    Pre(Pretrainer<E>),
    Task(TaskTrainer<E>),
}

impl<E: Environment> Trainer<E> {
    fn finished(&self) -> bool {
        match self {
            Trainer::Pre(t) => t.finished(),
            Trainer::Task(t) => t.finished(),
        }
    }

    fn epoch(&self) -> usize {
        match self {
            Trainer::Pre(t) => t.epoch(),
            Trainer::Task(t) => t.epoch(),
        }
    }

    fn run_epoch(&mut self) -> Result<EpochReport> {
        match self {
            Trainer::Pre(t) => t.run_epoch(),
            Trainer::Task(t) => t.run_epoch(),
        }
    }

    fn save(&self, dir: &Path) -> Result<()> {
        match self {
            Trainer::Pre(t) => t.save(dir),
            Trainer::Task(t) => t.save(dir),
        }
    }

    /// Whether the run ends after the next epoch.
    fn last_epoch_next(&self, cfg: &RunConfig) -> bool {
        match self {
            Trainer::Pre(t) => t.epoch() + 1 >= cfg.epochs,
            Trainer::Task(_) => false,
        }
    }
}

fn drive<E: Environment>(
    mut trainer: Trainer<E>,
    cfg: &RunConfig,
    seed: u64,
    dir: &Path,
    mut records: Vec<LogRecord>,
) -> Result<SeedOutcome> {
    let method = (cfg.phase == Phase::Train).then_some(cfg.method);
    let ckpt = dir.join("checkpoint");
    let mut log = LogWriter::create(&dir.join("run_log.jsonl"), &records)?;
    while !trainer.finished() {
        let last = trainer.last_epoch_next(cfg);
        let report = trainer.run_epoch()?;
        let record = LogRecord::from_report(cfg.phase, method, seed, &report, last);
        log.write(&record)?;
        info!(
            "seed {seed} epoch {} steps {} reward {:?} bob {:?}",
            record.epoch, record.env_steps_cumulative, record.mean_reward, record.bob_success_rate
        );
        records.push(record);
        if cfg.checkpoint_every > 0 && trainer.epoch() % cfg.checkpoint_every == 0 {
            trainer.save(&ckpt)?;
        }
    }
    trainer.save(&ckpt)?;
    let summary = match &trainer {
        Trainer::Pre(t) => SeedSummary {
            seed,
            phase: Phase::Pretrain,
            method: None,
            epochs: t.epoch(),
            env_steps: t.env_steps(),
            final_selfplay: records.last().and_then(|r| r.task_stats),
            eval: None,
        },
        Trainer::Task(t) => SeedSummary {
            seed,
            phase: Phase::Train,
            method: Some(cfg.method),
            epochs: t.epoch(),
            env_steps: t.env_steps(),
            final_selfplay: None,
            eval: (cfg.eval_episodes > 0)
                .then(|| t.evaluate(cfg.eval_episodes, seed))
                .transpose()?,
        },
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(SeedOutcome {
        summary,
        records,
        dir: dir.to_path_buf(),
    })
}

fn with_env<T>(
    cfg: &RunConfig,
    keydoor: impl FnOnce(KeyDoor) -> Result<T>,
    pointgather: impl FnOnce(PointGather) -> Result<T>,
) -> Result<T> {
    match cfg.env {
        EnvKind::KeyDoor => keydoor(KeyDoor::new(cfg.keydoor.clone())?),
        EnvKind::PointGather => pointgather(PointGather::new(cfg.pointgather.clone())?),
    }
}

fn fresh<E: Environment>(env: E, cfg: &RunConfig, seed: u64) -> Result<Trainer<E>> {
    Ok(match cfg.phase {
        Phase::Pretrain => Trainer::Pre(Pretrainer::new(env, cfg.clone(), seed)?),
        Phase::Train => Trainer::Task(TaskTrainer::new(env, cfg.clone(), seed, pretrained_for(cfg, seed)?)?),
    })
}

fn resumed<E: Environment>(env: E, cfg: &RunConfig, ckpt: &Path) -> Result<Trainer<E>> {
    Ok(match cfg.phase {
        Phase::Pretrain => Trainer::Pre(Pretrainer::resume(env, cfg.clone(), ckpt)?),
        Phase::Train => Trainer::Task(TaskTrainer::resume(env, cfg.clone(), ckpt)?),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Runs one seed from scratch into `out_dir/seed-<seed>`.
pub fn run_seed(cfg: &RunConfig, seed: u64) -> Result<SeedOutcome> {
    cfg.validate()?;
    let dir = seed_dir(&cfg.out_dir, seed);
    create_dir(&dir)?;
    info!("seed {seed}: {:?} phase on {:?}, output in {}", cfg.phase, cfg.env, dir.display());
    with_env(
        cfg,
        |env| drive(fresh(env, cfg, seed)?, cfg, seed, &dir, vec![]),
        |env| drive(fresh(env, cfg, seed)?, cfg, seed, &dir, vec![]),
    )
}

/// Continues the run of `seed` from its checkpoint. The run log is cut back
/// to the checkpoint's epoch, so the finished log equals that of an
/// uninterrupted run.
pub fn resume_seed(cfg: &RunConfig, seed: u64) -> Result<SeedOutcome> {
    cfg.validate()?;
    let dir = seed_dir(&cfg.out_dir, seed);
    let ckpt = dir.join("checkpoint");
    let log_path = dir.join("run_log.jsonl");
    let previous = if log_path.exists() {
        read_run_log(&log_path)?.records
    } else {
        vec![]
    };
    with_env(
        cfg,
        |env| {
            let (t, keep) = resume_point(resumed(env, cfg, &ckpt)?, &previous, &log_path)?;
            drive(t, cfg, seed, &dir, keep)
        },
        |env| {
            let (t, keep) = resume_point(resumed(env, cfg, &ckpt)?, &previous, &log_path)?;
            drive(t, cfg, seed, &dir, keep)
        },
    )
}

fn resume_point<E: Environment>(
    trainer: Trainer<E>,
    previous: &[LogRecord],
    log_path: &Path,
) -> Result<(Trainer<E>, Vec<LogRecord>)> {
    let epoch = trainer.epoch();
    // the final-epoch task dump belongs only to the run's true last epoch
    let keep: Vec<LogRecord> = previous
        .iter()
        .filter(|r| r.epoch <= epoch)
        .map(|r| LogRecord {
            final_tasks: None,
            ..r.clone()
        })
        .collect();
    if keep.len() != epoch {
        return Err(Error::format(
            "run log",
            format!("{} has {} records before checkpoint epoch {epoch}", log_path.display(), keep.len()),
        ));
    }
    info!("resuming at epoch {epoch}");
    Ok((trainer, keep))
}

/// Runs every seed of `cfg` in sequence and writes `aggregate.csv`. A failing
/// seed aborts the run with its error.
pub fn run_all(cfg: &RunConfig) -> Result<Vec<SeedOutcome>> {
    let mut outcomes = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        outcomes.push(run_seed(cfg, seed).map_err(|e| {
            log::error!("seed {seed} failed: {e}");
            e
        })?);
    }
    create_dir(&cfg.out_dir)?;
    write_aggregate(&cfg.out_dir.join("aggregate.csv"), &aggregate(&outcomes))?;
    Ok(outcomes)
}

/// Mean and population standard deviation of one metric across seeds at one
/// epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub version: u32,
    pub phase: Phase,
    /// Empty for pre-training.
    pub method: String,
    pub metric: String,
    pub epoch: usize,
    /// Mean over seeds of the cumulative environment steps at this epoch.
    pub env_steps: f64,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

fn record_metrics(r: &LogRecord) -> Vec<(&'static str, f64)> {
    let mut m = vec![];
    if let Some(v) = r.mean_reward {
        m.push(("mean_reward", v));
    }
    if let Some(v) = r.success_rate {
        m.push(("success_rate", v));
    }
    if let Some(s) = r.task_stats {
        m.push(("bob_success_rate", s.bob_success_rate));
        m.push(("key_prob", s.key_prob));
        m.push(("door_prob", s.door_prob));
        m.push(("mean_task_distance", s.mean_task_distance));
        m.push(("mean_games", s.mean_games));
    }
    m
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-epoch aggregates of every logged metric, plus the final evaluation
/// (`eval_mean_reward`, `eval_success_rate`) at each seed's last epoch.
pub fn aggregate(outcomes: &[SeedOutcome]) -> Vec<AggregateRow> {
    let mut cells: BTreeMap<(String, String, Phase, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut order: Vec<(String, String, Phase, usize)> = vec![];
    let mut push = |key: (String, String, Phase, usize), steps: f64, value: f64| {
        let e = cells.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (vec![], vec![])
        });
        e.0.push(steps);
        e.1.push(value);
    };
    for o in outcomes {
        let method = o.summary.method.map(|m| m.as_str().to_string()).unwrap_or_default();
        for r in &o.records {
            for (metric, v) in record_metrics(r) {
                push((method.clone(), metric.to_string(), r.phase, r.epoch), r.env_steps_cumulative as f64, v);
            }
        }
        if let Some(e) = o.summary.eval {
            let steps = o.summary.env_steps as f64;
            push((method.clone(), "eval_mean_reward".into(), o.summary.phase, o.summary.epochs), steps, e.mean_reward);
            push((method.clone(), "eval_success_rate".into(), o.summary.phase, o.summary.epochs), steps, e.success_rate);
        }
    }
    order.sort();
    order
        .into_iter()
        .map(|key| {
            let (steps, values) = &cells[&key];
            let (mean, std) = mean_std(values);
            AggregateRow {
                version: AGGREGATE_VERSION,
                phase: key.2,
                method: key.0,
                metric: key.1,
                epoch: key.3,
                env_steps: mean_std(steps).0,
                mean,
                std,
                n: values.len(),
            }
        })
        .collect()
}

pub fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format("aggregate csv", e))?;
    if rows.is_empty() {
        w.write_record(["version", "phase", "method", "metric", "epoch", "env_steps", "mean", "std", "n"])
            .map_err(|e| Error::format("aggregate csv", e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::format("aggregate csv", e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dir: &Path, phase: Phase) -> RunConfig {
        let mut cfg = RunConfig::defaults_for(EnvKind::KeyDoor);
        cfg.phase = phase;
        cfg.hidden = 8;
        cfg.batch_size = 4;
        cfg.updates_per_epoch = 2;
        cfg.epochs = 3;
        cfg.eval_episodes = 5;
        cfg.seeds = vec![1, 2];
        cfg.out_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn pretrain_writes_log_summary_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let outcomes = run_all(&cfg(dir.path(), Phase::Pretrain)).unwrap();
        assert_eq!(outcomes.len(), 2);
        let o = &outcomes[0];
        let log = read_run_log(&o.dir.join("run_log.jsonl")).unwrap();
        assert_eq!(log.skipped, 0);
        assert_eq!(log.records, o.records);
        assert_eq!(log.records.len(), 3);
        assert!(log.records[..2].iter().all(|r| r.final_tasks.is_none()));
        let tasks = log.records[2].final_tasks.as_ref().unwrap();
        assert_eq!(tasks.len(), log.records[2].task_stats.unwrap().games);
        for f in ["alice.json", "bob.json", "encoder.json", "trainer.json", "config.toml"] {
            assert!(o.checkpoint_dir().join(f).is_file(), "{f}");
        }
        assert!(o.dir.join("summary.json").is_file());
        let text = fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
        assert!(text.starts_with("version,phase,method,metric,epoch,env_steps,mean,std,n"));
        assert!(text.contains("key_prob"));
    }

    #[test]
    fn truncated_log_lines_are_counted() {
        let dir = tempfile::tempdir().unwrap();
        let o = run_seed(&cfg(dir.path(), Phase::Pretrain), 4).unwrap();
        let path = o.dir.join("run_log.jsonl");
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{\"version\":1,\"phase\":\"pre");
        fs::write(&path, text).unwrap();
        let log = read_run_log(&path).unwrap();
        assert_eq!(log.records.len(), 3);
        assert_eq!(log.skipped, 1);
    }

    #[test]
    fn train_uses_pretrained_checkpoint_per_seed() {
        let pre_dir = tempfile::tempdir().unwrap();
        run_all(&cfg(pre_dir.path(), Phase::Pretrain)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(dir.path(), Phase::Train);
        c.pretrained = Some(pre_dir.path().to_path_buf());
        let outcomes = run_all(&c).unwrap();
        for o in &outcomes {
            let eval = o.summary.eval.unwrap();
            assert_eq!(eval.episodes, 5);
            assert!(o.records.iter().all(|r| r.mean_reward.is_some() && r.task_stats.is_none()));
            assert!(o.checkpoint_dir().join("charlie.json").is_file());
            assert!(o.checkpoint_dir().join("encoder.json").is_file());
        }
        let rows = aggregate(&outcomes);
        let eval = rows.iter().find(|r| r.metric == "eval_mean_reward").unwrap();
        assert_eq!(eval.n, 2);
        assert_eq!(eval.method, "hsp");
    }

    #[test]
    fn missing_pretrained_checkpoint_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(dir.path(), Phase::Train);
        c.pretrained = Some(dir.path().join("nowhere"));
        let err = run_seed(&c, 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn resumed_run_log_is_identical() {
        for phase in [Phase::Pretrain, Phase::Train] {
            let a = tempfile::tempdir().unwrap();
            let b = tempfile::tempdir().unwrap();
            run_seed(&cfg(a.path(), phase), 3).unwrap();
            let mut short = cfg(b.path(), phase);
            short.epochs = 1;
            run_seed(&short, 3).unwrap();
            resume_seed(&cfg(b.path(), phase), 3).unwrap();
            let read = |d: &Path| fs::read(seed_dir(d, 3).join("run_log.jsonl")).unwrap();
            assert_eq!(read(a.path()), read(b.path()), "{phase:?}");
        }
    }

    #[test]
    fn aggregate_is_population_mean_and_std() {
        let rec = |seed, v: f64| LogRecord {
            version: RUN_LOG_VERSION,
            phase: Phase::Train,
            method: Some(Method::Hsp),
            seed,
            epoch: 1,
            updates: 1,
            episodes: 1,
            env_steps_cumulative: 100 * seed,
            mean_reward: Some(v),
            success_rate: None,
            bob_success_rate: None,
            losses: BTreeMap::new(),
            task_stats: None,
            rejected_updates: vec![],
            final_tasks: None,
        };
        let outcome = |seed, v| SeedOutcome {
            summary: SeedSummary {
                seed,
                phase: Phase::Train,
                method: Some(Method::Hsp),
                epochs: 1,
                env_steps: 0,
                final_selfplay: None,
                eval: None,
            },
            records: vec![rec(seed, v)],
            dir: PathBuf::new(),
        };
        let rows = aggregate(&[outcome(1, 0.2), outcome(3, 0.6)]);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].mean - 0.4).abs() < 1e-12);
        assert!((rows[0].std - 0.2).abs() < 1e-12);
        assert_eq!(rows[0].env_steps, 200.0);
        assert_eq!(rows[0].n, 2);
    }
}

//! Exporters over trained checkpoints and run logs: goal embeddings, fixed-goal
//! rollouts and self-play task statistics. Every export is flat CSV or JSON
//! lines whose first field is a schema version, and every function here is
//! deterministic given its inputs and seed.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::keydoor::Cell;
use crate::env::{Environment, KeyDoor, KeyDoorState, PointGather};
use crate::error::{Error, Result};
use crate::policies::{AlicePolicy, BobPolicy, GoalEncoder};
use crate::selfplay::{run_selfplay_episode, SelfPlayConfig};
use crate::training::runner::LogRecord;

pub const EMBEDDING_VERSION: u32 = 1;
pub const TRACE_VERSION: u32 = 1;
pub const GOAL_SUMMARY_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;

/// What an embedding row describes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StateDescriptor {
    Grid { row: usize, col: usize, door_locked: bool },
    Plane { x: f64, y: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub state: StateDescriptor,
    pub phi: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingExport {
    pub rows: Vec<EmbeddingRow>,
    /// States that could not be embedded, with the reason.
    pub failures: Vec<String>,
}

/// Cells reachable from the maze's start cell once the door is open.
pub fn reachable_cells(maze: &KeyDoorState) -> Vec<Cell> {
    let mut seen = vec![false; maze.width * maze.height];
    let mut queue = VecDeque::from([maze.agent]);
    seen[maze.agent.row * maze.width + maze.agent.col] = true;
    let mut out = vec![];
    while let Some(c) = queue.pop_front() {
        out.push(c);
        let (r, k) = (c.row as isize, c.col as isize);
        for (nr, nc) in [(r - 1, k), (r + 1, k), (r, k - 1), (r, k + 1)] {
            if nr < 0 || nc < 0 || nr >= maze.height as isize || nc >= maze.width as isize {
                continue;
            }
            let n = Cell::new(nr as usize, nc as usize);
            if !maze.is_wall(n) && !seen[n.row * maze.width + n.col] {
                seen[n.row * maze.width + n.col] = true;
                queue.push_back(n);
            }
        }
    }
    out.sort();
    out
}

/// The maze generated by `env.reset` under `maze_seed`.
pub fn keydoor_maze(env: &KeyDoor, maze_seed: u64) -> Result<KeyDoorState> {
    env.reset(&mut ChaCha8Rng::seed_from_u64(maze_seed))
}

/// `phi(s)` for every reachable agent cell of one maze, with the key taken,
/// once with the door locked and once unlocked. The door cell itself only
/// appears unlocked.
pub fn keydoor_embeddings(env: &KeyDoor, encoder: &GoalEncoder, maze_seed: u64) -> Result<EmbeddingExport> {
    let maze = keydoor_maze(env, maze_seed)?;
    if encoder.network().input_dim() != env.low_obs_dim() {
        return Err(Error::Config("encoder input does not match the keydoor observation".into()));
    }
    let mut export = EmbeddingExport::default();
    for door_locked in [true, false] {
        for cell in reachable_cells(&maze) {
            if door_locked && cell == maze.door {
                continue;
            }
            let state = KeyDoorState {
                door_locked,
                key: None,
                has_key: true,
                agent: cell,
                steps: 0,
                ..maze.clone()
            };
            match encoder.embed(&state.observation()) {
                Ok(phi) => export.rows.push(EmbeddingRow {
                    state: StateDescriptor::Grid {
                        row: cell.row,
                        col: cell.col,
                        door_locked,
                    },
                    phi,
                }),
                Err(e) => {
                    warn!("cannot embed agent cell {cell:?} (door locked: {door_locked}): {e}");
                    export
                        .failures
                        .push(format!("row {} col {} door_locked {door_locked}: {e}", cell.row, cell.col));
                }
            }
        }
    }
    Ok(export)
}

/// `phi(s*)` for the targets of the first `n_games` self-play games played
/// from fresh episodes, with the target's planar position.
pub fn pointgather_embeddings(
    env: &PointGather,
    alice: &AlicePolicy,
    bob: &BobPolicy,
    encoder: &GoalEncoder,
    selfplay: &SelfPlayConfig,
    n_games: usize,
    seed: u64,
) -> Result<EmbeddingExport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut export = EmbeddingExport::default();
    while export.rows.len() < n_games {
        let start = env.reset(&mut rng)?;
        let ep = run_selfplay_episode(env, alice, bob, encoder, selfplay, start, &mut rng)?;
        for g in ep.games {
            if export.rows.len() == n_games {
                break;
            }
            export.rows.push(EmbeddingRow {
                state: StateDescriptor::Plane {
                    x: g.target.pos[0],
                    y: g.target.pos[1],
                },
                phi: encoder.embed(&g.target_obs)?,
            });
        }
    }
    Ok(export)
}

fn csv_err(e: csv::Error) -> Error {
    Error::format("csv", e)
}

/// Columns: `version,row,col,door_locked,x,y,phi_0..phi_{K-1}`. Grid rows
/// leave `x,y` empty; planar rows leave `row,col,door_locked` empty.
pub fn write_embeddings_csv(path: &Path, rows: &[EmbeddingRow], k: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = ["version", "row", "col", "door_locked", "x", "y"].map(String::from).to_vec();
    header.extend((0..k).map(|i| format!("phi_{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        check_phi(r, k)?;
        let mut rec = vec![EMBEDDING_VERSION.to_string()];
        match r.state {
            StateDescriptor::Grid { row, col, door_locked } => {
                rec.extend([row.to_string(), col.to_string(), door_locked.to_string(), String::new(), String::new()])
            }
            StateDescriptor::Plane { x, y } => {
                rec.extend([String::new(), String::new(), String::new(), x.to_string(), y.to_string()])
            }
        }
        rec.extend(r.phi.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn check_phi(r: &EmbeddingRow, k: usize) -> Result<()> {
    if r.phi.len() != k {
        return Err(Error::Shape {
            context: "embedding row",
            expected: k,
            actual: r.phi.len(),
        });
    }
    Ok(())
}

pub fn read_embeddings_csv(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format("embedding csv", format!("missing column `{name}`")))
    };
    let version = col("version")?;
    let phi_cols: Vec<usize> = (0..)
        .map_while(|i| headers.iter().position(|h| h == format!("phi_{i}")))
        .collect();
    let (c_row, c_col, c_locked, c_x, c_y) = (col("row")?, col("col")?, col("door_locked")?, col("x")?, col("y")?);
    let bad = |detail: String| Error::format("embedding csv", detail);
    let mut rows = vec![];
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        if rec[version] != EMBEDDING_VERSION.to_string() {
            return Err(bad(format!("unsupported version {}", &rec[version])));
        }
        let num = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(format!("`{}`: {e}", &rec[i])));
        let state = if rec[c_row].is_empty() {
            StateDescriptor::Plane {
                x: num(c_x)?,
                y: num(c_y)?,
            }
        } else {
            StateDescriptor::Grid {
                row: rec[c_row].parse().map_err(|e| bad(format!("row: {e}")))?,
                col: rec[c_col].parse().map_err(|e| bad(format!("col: {e}")))?,
                door_locked: rec[c_locked].parse().map_err(|e| bad(format!("door_locked: {e}")))?,
            }
        };
        let phi = phi_cols.iter().map(|&i| num(i)).collect::<Result<Vec<_>>>()?;
        rows.push(EmbeddingRow { state, phi });
    }
    Ok(rows)
}

/// Picks `n` mutually distant embeddings by farthest-point selection,
/// starting from the one with the largest norm.
pub fn pick_goals(rows: &[EmbeddingRow], n: usize) -> Vec<Vec<f64>> {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let norm = |a: &[f64]| a.iter().map(|x| x * x).sum::<f64>();
    let Some(first) = rows.iter().max_by(|a, b| norm(&a.phi).total_cmp(&norm(&b.phi))) else {
        return vec![];
    };
    let mut picked = vec![first.phi.clone()];
    while picked.len() < n.min(rows.len()) {
        let next = rows
            .iter()
            .max_by(|a, b| {
                let da = picked.iter().map(|p| dist(&a.phi, p)).fold(f64::INFINITY, f64::min);
                let db = picked.iter().map(|p| dist(&b.phi, p)).fold(f64::INFINITY, f64::min);
                da.total_cmp(&db)
            })
            .expect("rows is non-empty");
        picked.push(next.phi.clone());
    }
    picked
}

/// One Bob rollout under a fixed goal: positions after each step.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalTrace {
    pub goal_index: usize,
    pub rollout: usize,
    pub start: [f64; 2],
    pub points: Vec<[f64; 2]>,
}

impl GoalTrace {
    pub fn displacement(&self) -> [f64; 2] {
        let end = self.points.last().copied().unwrap_or(self.start);
        [end[0] - self.start[0], end[1] - self.start[1]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalSummary {
    pub version: u32,
    pub goal_index: usize,
    pub goal: Vec<f64>,
    pub rollouts: usize,
    pub mean_dx: f64,
    pub mean_dy: f64,
    /// Length of the mean displacement vector.
    pub mean_displacement: f64,
    /// Mean length of the individual displacements.
    pub mean_distance: f64,
    /// One minus the mean resultant length of the displacement directions:
    /// 0 when all rollouts head the same way, near 1 when they scatter.
    pub angular_dispersion: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoalRollouts {
    pub traces: Vec<GoalTrace>,
    pub summaries: Vec<GoalSummary>,
}

/// Runs Bob for `steps` steps from a fresh episode `n_per_goal` times per
/// goal and summarises where he goes.
pub fn goal_rollouts(
    env: &PointGather,
    bob: &BobPolicy,
    goals: &[Vec<f64>],
    n_per_goal: usize,
    steps: usize,
    seed: u64,
) -> Result<GoalRollouts> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut traces = vec![];
    let mut summaries = vec![];
    for (goal_index, goal) in goals.iter().enumerate() {
        let first = traces.len();
        for rollout in 0..n_per_goal {
            let mut s = env.reset(&mut rng)?;
            let start = s.pos;
            let mut points = Vec::with_capacity(steps);
            for _ in 0..steps {
                if env.is_done(&s) {
                    break;
                }
                let d = bob.act_with_goal(&env.observe_low(&s), goal, &mut rng)?;
                env.step(&mut s, d.action.discrete().expect("bob acts discretely"))?;
                points.push(s.pos);
            }
            traces.push(GoalTrace {
                goal_index,
                rollout,
                start,
                points,
            });
        }
        summaries.push(summarize_goal(goal_index, goal, &traces[first..]));
    }
    Ok(GoalRollouts { traces, summaries })
}

pub fn summarize_goal(goal_index: usize, goal: &[f64], traces: &[GoalTrace]) -> GoalSummary {
    let n = traces.len().max(1) as f64;
    let disp: Vec<[f64; 2]> = traces.iter().map(GoalTrace::displacement).collect();
    let mean_dx = disp.iter().map(|d| d[0]).sum::<f64>() / n;
    let mean_dy = disp.iter().map(|d| d[1]).sum::<f64>() / n;
    let lens: Vec<f64> = disp.iter().map(|d| d[0].hypot(d[1])).collect();
    let (mut ux, mut uy, mut moved) = (0.0, 0.0, 0);
    for (d, l) in disp.iter().zip(&lens) {
        if *l > 0.0 {
            ux += d[0] / l;
            uy += d[1] / l;
            moved += 1;
        }
    }
    let resultant = if moved == 0 {
        0.0
    } else {
        (ux / moved as f64).hypot(uy / moved as f64)
    };
    GoalSummary {
        version: GOAL_SUMMARY_VERSION,
        goal_index,
        goal: goal.to_vec(),
        rollouts: traces.len(),
        mean_dx,
        mean_dy,
        mean_displacement: mean_dx.hypot(mean_dy),
        mean_distance: lens.iter().sum::<f64>() / n,
        angular_dispersion: 1.0 - resultant,
    }
}

/// Angle in degrees between two vectors, in `[0, 180]`.
pub fn angle_between(a: [f64; 2], b: [f64; 2]) -> f64 {
    let cross = a[0] * b[1] - a[1] * b[0];
    let dot = a[0] * b[0] + a[1] * b[1];
    cross.abs().atan2(dot).to_degrees()
}

#[derive(Serialize)]
struct TraceLine {
    version: u32,
    goal_index: usize,
    rollout: usize,
    t: usize,
    x: f64,
    y: f64,
}

/// One JSON line per step: `{version, goal_index, rollout, t, x, y}` with
/// `t` counting from 1.
pub fn write_traces_jsonl(path: &Path, traces: &[GoalTrace]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for tr in traces {
        for (i, p) in tr.points.iter().enumerate() {
            let line = TraceLine {
                version: TRACE_VERSION,
                goal_index: tr.goal_index,
                rollout: tr.rollout,
                t: i + 1,
                x: p[0],
                y: p[1],
            };
            let text = serde_json::to_string(&line).map_err(|e| Error::format("trace line", e))?;
            writeln!(w, "{text}").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Columns: `version,goal_index,goal,rollouts,mean_dx,mean_dy,
/// mean_displacement,mean_distance,angular_dispersion`, with the goal as
/// space-separated numbers.
pub fn write_goal_summaries_csv(path: &Path, summaries: &[GoalSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "version",
        "goal_index",
        "goal",
        "rollouts",
        "mean_dx",
        "mean_dy",
        "mean_displacement",
        "mean_distance",
        "angular_dispersion",
    ])
    .map_err(csv_err)?;
    for s in summaries {
        let goal = s.goal.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
        w.write_record([
            s.version.to_string(),
            s.goal_index.to_string(),
            goal,
            s.rollouts.to_string(),
            s.mean_dx.to_string(),
            s.mean_dy.to_string(),
            s.mean_displacement.to_string(),
            s.mean_distance.to_string(),
            s.angular_dispersion.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row of the self-play time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub version: u32,
    pub seed: u64,
    pub epoch: usize,
    pub env_steps: u64,
    pub key_prob: f64,
    pub door_prob: f64,
    pub mean_task_distance: f64,
    pub bob_success_rate: f64,
    pub mean_games: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalPoint {
    pub version: u32,
    pub start_x: f64,
    pub start_y: f64,
    pub x: f64,
    pub y: f64,
    /// Octant of `target - start`, counter-clockwise from +x; empty when
    /// the target equals the start.
    pub octant: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelfPlayReport {
    pub rows: Vec<ReportRow>,
    pub goals: Vec<GoalPoint>,
    /// Count of goals per octant of their direction from the game start.
    pub octants: [usize; 8],
}

impl SelfPlayReport {
    pub fn occupied_octants(&self) -> usize {
        self.octants.iter().filter(|&&c| c > 0).count()
    }
}

pub fn octant(dx: f64, dy: f64) -> Option<usize> {
    if dx == 0.0 && dy == 0.0 {
        return None;
    }
    let angle = dy.atan2(dx).rem_euclid(std::f64::consts::TAU);
    Some(((angle / std::f64::consts::FRAC_PI_4) as usize).min(7))
}

/// Time series of the pre-training records and the goal scatter of the last
/// record that carries the final epoch's tasks.
pub fn selfplay_report(records: &[LogRecord]) -> SelfPlayReport {
    let mut report = SelfPlayReport::default();
    for r in records {
        if let Some(s) = r.task_stats {
            report.rows.push(ReportRow {
                version: REPORT_VERSION,
                seed: r.seed,
                epoch: r.epoch,
                env_steps: r.env_steps_cumulative,
                key_prob: s.key_prob,
                door_prob: s.door_prob,
                mean_task_distance: s.mean_task_distance,
                bob_success_rate: s.bob_success_rate,
                mean_games: s.mean_games,
            });
        }
    }
    if let Some(tasks) = records.iter().rev().find_map(|r| r.final_tasks.as_ref()) {
        for t in tasks {
            let o = octant(t.target_xy[0] - t.start_xy[0], t.target_xy[1] - t.start_xy[1]);
            if let Some(o) = o {
                report.octants[o] += 1;
            }
            report.goals.push(GoalPoint {
                version: REPORT_VERSION,
                start_x: t.start_xy[0],
                start_y: t.start_xy[1],
                x: t.target_xy[0],
                y: t.target_xy[1],
                octant: o,
            });
        }
    }
    report
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record(header).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `selfplay_stats.csv`, `goal_scatter.csv` and `octants.csv` into
/// `dir`.
pub fn write_selfplay_report(dir: &Path, report: &SelfPlayReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_rows(
        &dir.join("selfplay_stats.csv"),
        &report.rows,
        &[
            "version",
            "seed",
            "epoch",
            "env_steps",
            "key_prob",
            "door_prob",
            "mean_task_distance",
            "bob_success_rate",
            "mean_games",
        ],
    )?;
    write_rows(
        &dir.join("goal_scatter.csv"),
        &report.goals,
        &["version", "start_x", "start_y", "x", "y", "octant"],
    )?;
    #[derive(Serialize)]
    struct OctantRow {
        version: u32,
        octant: usize,
        count: usize,
    }
    let octants: Vec<OctantRow> = (0..8)
        .map(|o| OctantRow {
            version: REPORT_VERSION,
            octant: o,
            count: report.octants[o],
        })
        .collect();
    write_rows(&dir.join("octants.csv"), &octants, &["version", "octant", "count"])
}

/// Training accuracy of a logistic-regression classifier on standardized
/// features, fit by full-batch gradient descent.
pub fn linear_separability(features: &[Vec<f64>], labels: &[bool]) -> f64 {
    let n = features.len();
    if n == 0 {
        return 0.0;
    }
    let d = features[0].len();
    let mean: Vec<f64> = (0..d).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n as f64).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| {
            let v = features.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let x: Vec<Vec<f64>> = features
        .iter()
        .map(|f| (0..d).map(|j| (f[j] - mean[j]) / sd[j]).collect())
        .collect();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let score = |w: &[f64], b: f64, xi: &[f64]| b + w.iter().zip(xi).map(|(a, c)| a * c).sum::<f64>();
    for _ in 0..5000 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (xi, &yi) in x.iter().zip(labels) {
            let p = 1.0 / (1.0 + (-score(&w, b, xi)).exp());
            let err = p - if yi { 1.0 } else { 0.0 };
            for j in 0..d {
                gw[j] += err * xi[j];
            }
            gb += err;
        }
        for j in 0..d {
            w[j] -= 0.5 * gw[j] / n as f64;
        }
        b -= 0.5 * gb / n as f64;
    }
    let correct = x
        .iter()
        .zip(labels)
        .filter(|(xi, &yi)| (score(&w, b, xi) > 0.0) == yi)
        .count();
    correct as f64 / n as f64
}

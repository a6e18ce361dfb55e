//! Benchmark drivers. The datastore and coordinator run in this process;
//! every worker is a child process running `gradloom worker`.

use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use gradloom_core::coordinator::{BudgetMode, ProjectConfig};
use gradloom_core::nn::{Hyperparams, NetworkSpec};
use gradloom_core::protocol::{IterationRecord, WorkerMode};
use gradloom_node::local::LocalCluster;
use serde::{Deserialize, Serialize};

/// One row of `scaling.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n: usize,
    /// Mean examples per second over the measured iterations.
    pub power: f64,
    /// Mean of the per-worker latency estimates over the measured iterations.
    pub mean_latency_ms: f64,
    /// 95th percentile (nearest rank) of the same samples.
    pub p95_latency_ms: f64,
}

/// One row of `convergence.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub iteration: u64,
    pub test_error: f64,
}

#[derive(Debug, Clone)]
pub struct ScalingOptions {
    pub train_zip: PathBuf,
    pub spec: NetworkSpec,
    pub hyper: Hyperparams,
    pub worker_counts: Vec<usize>,
    pub warmup: u64,
    pub iterations: u64,
    pub period_s: f64,
    pub worker_exe: PathBuf,
    /// How long to wait for all workers to hold their data.
    pub join_timeout: Duration,
}

#[derive(Debug, Clone)]
pub struct ConvergenceOptions {
    pub train_zip: PathBuf,
    pub test_zip: PathBuf,
    pub spec: NetworkSpec,
    pub hyper: Hyperparams,
    pub workers: usize,
    pub iterations: u64,
    pub period_s: f64,
    pub seed: u64,
    pub worker_exe: PathBuf,
    pub join_timeout: Duration,
}

/// Child processes killed on drop.
#[derive(Default)]
pub struct Children(Vec<Child>);

impl Children {
    pub fn spawn(&mut self, cmd: &mut Command) -> Result<()> {
        let child = cmd.spawn().with_context(|| format!("spawning {cmd:?}"))?;
        self.0.push(child);
        Ok(())
    }

    /// Fails if any child has already exited.
    pub fn check_alive(&mut self) -> Result<()> {
        for c in &mut self.0 {
            if let Some(status) = c.try_wait()? {
                bail!("worker process {} exited early with {status}", c.id());
            }
        }
        Ok(())
    }

    pub fn kill_all(&mut self) {
        for mut c in self.0.drain(..) {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

impl Drop for Children {
    fn drop(&mut self) {
        self.kill_all();
    }
}

pub struct WorkerArgs<'a> {
    pub exe: &'a Path,
    pub cluster: &'a LocalCluster,
    pub project: &'a str,
    pub id: &'a str,
    pub mode: WorkerMode,
    pub seed: u64,
    pub test_set: Option<&'a Path>,
}

pub fn worker_command(a: WorkerArgs<'_>) -> Command {
    let mut cmd = Command::new(a.exe);
    cmd.arg("worker")
        .args(["--coordinator", &a.cluster.ws_url()])
        .args(["--datastore", &a.cluster.datastore_url()])
        .args(["--project", a.project])
        .args(["--id", a.id])
        .args(["--mode", &a.mode.to_string()])
        .args(["--seed", &a.seed.to_string()])
        .env("RUST_LOG", std::env::var("GRADLOOM_WORKER_LOG").unwrap_or_else(|_| "warn".into()))
        .stdin(Stdio::null())
        .stdout(Stdio::null());
    if let Some(t) = a.test_set {
        cmd.arg("--test-set").arg(t);
    }
    cmd
}

fn ingest(cluster: &LocalCluster, id: &str, zip: &Path) -> Result<()> {
    let bytes = std::fs::read(zip).with_context(|| format!("reading {}", zip.display()))?;
    cluster.ingest(id, &bytes)?;
    Ok(())
}

/// Waits until `n` trainers have joined and cached their data; returns the
/// last recorded iteration at that point.
fn wait_ready(cluster: &LocalCluster, project: &str, n: usize, children: &mut Children, timeout: Duration) -> Result<u64> {
    let end = Instant::now() + timeout;
    loop {
        children.check_alive()?;
        let workers = cluster.client().workers(project)?;
        let ready = workers
            .iter()
            .filter(|w| w.mode == WorkerMode::Train && w.cache_ready)
            .count();
        if ready >= n {
            let last = cluster.client().history(project, 0)?.last().map_or(0, |r| r.iteration);
            return Ok(last);
        }
        if Instant::now() > end {
            bail!("only {ready} of {n} workers joined and cached their data within {timeout:?}");
        }
        std::thread::sleep(Duration::from_millis(100));
    }
}

fn wait_records(
    cluster: &LocalCluster,
    project: &str,
    until: u64,
    children: &mut Children,
    timeout: Duration,
) -> Result<Vec<IterationRecord>> {
    let end = Instant::now() + timeout;
    loop {
        children.check_alive()?;
        let history = cluster.client().history(project, 0)?;
        if history.last().is_some_and(|r| r.iteration >= until) {
            return Ok(history);
        }
        if Instant::now() > end {
            bail!("iteration {until} not reached within {timeout:?}");
        }
        std::thread::sleep(Duration::from_millis(100));
    }
}

/// Nearest-rank percentile of unsorted samples.
pub fn percentile(samples: &[f64], p: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * s.len() as f64).ceil().max(1.0) as usize;
    s[rank.min(s.len()) - 1]
}

/// Summarises the measured records of one scaling run.
pub fn scaling_row(n: usize, records: &[IterationRecord]) -> ScalingRow {
    let power = records.iter().map(|r| r.power).sum::<f64>() / records.len().max(1) as f64;
    let latencies: Vec<f64> = records
        .iter()
        .flat_map(|r| r.workers.iter())
        .filter(|w| w.mode == WorkerMode::Train)
        .map(|w| w.latency_ewma_ms)
        .collect();
    let mean = latencies.iter().sum::<f64>() / latencies.len().max(1) as f64;
    ScalingRow {
        n,
        power,
        mean_latency_ms: mean,
        p95_latency_ms: percentile(&latencies, 95.0),
    }
}

pub fn scaling(opts: &ScalingOptions) -> Result<Vec<ScalingRow>> {
    let dir = tempfile::tempdir()?;
    let cluster = LocalCluster::start(dir.path(), 1000)?;
    ingest(&cluster, "train", &opts.train_zip)?;
    let mut rows = Vec::new();
    for &n in &opts.worker_counts {
        let project = format!("scaling-{n}");
        let mut config = ProjectConfig::new(project.clone(), opts.spec.clone(), opts.period_s);
        config.mode = BudgetMode::TimeBudget;
        config.hyper = Some(opts.hyper.clone());
        config.min_trainers = n;
        cluster.create_project(&config, &["train"])?;
        let mut children = Children::default();
        for i in 0..n {
            let id = format!("w{i}");
            children.spawn(&mut worker_command(WorkerArgs {
                exe: &opts.worker_exe,
                cluster: &cluster,
                project: &project,
                id: &id,
                mode: WorkerMode::Train,
                seed: i as u64,
                test_set: None,
            }))?;
        }
        let start = wait_ready(&cluster, &project, n, &mut children, opts.join_timeout)
            .with_context(|| format!("n = {n}"))?;
        // the first window after readiness starts one boundary later
        let first = start + 2 + opts.warmup;
        let last = first + opts.iterations - 1;
        let budget = Duration::from_secs_f64((opts.warmup + opts.iterations + 4) as f64 * opts.period_s * 3.0 + 30.0);
        let history = wait_records(&cluster, &project, last, &mut children, budget)?;
        let measured: Vec<IterationRecord> = history
            .into_iter()
            .filter(|r| (first..=last).contains(&r.iteration))
            .collect();
        let row = scaling_row(n, &measured);
        tracing::info!(n, power = row.power, mean_latency_ms = row.mean_latency_ms, "scaling row");
        rows.push(row);
        children.kill_all();
    }
    cluster.shutdown();
    Ok(rows)
}

/// Tracker test errors by iteration, one row per iteration, ascending.
pub fn convergence_rows(history: &[IterationRecord]) -> Vec<ConvergenceRow> {
    let mut by_iteration = std::collections::BTreeMap::new();
    for m in history.iter().flat_map(|r| r.metrics.iter()) {
        if m.metric_name == "test_error" {
            by_iteration.insert(m.iteration, m.value);
        }
    }
    by_iteration
        .into_iter()
        .map(|(iteration, test_error)| ConvergenceRow { iteration, test_error })
        .collect()
}

pub fn convergence(opts: &ConvergenceOptions) -> Result<Vec<ConvergenceRow>> {
    let dir = tempfile::tempdir()?;
    let cluster = LocalCluster::start(dir.path(), 1000)?;
    ingest(&cluster, "train", &opts.train_zip)?;
    let project = "convergence";
    let mut config = ProjectConfig::new(project, opts.spec.clone(), opts.period_s);
    config.hyper = Some(opts.hyper.clone());
    config.seed = opts.seed;
    config.min_trainers = opts.workers;
    cluster.create_project(&config, &["train"])?;
    let mut children = Children::default();
    children.spawn(&mut worker_command(WorkerArgs {
        exe: &opts.worker_exe,
        cluster: &cluster,
        project,
        id: "tracker",
        mode: WorkerMode::Track,
        seed: opts.seed,
        test_set: Some(&opts.test_zip),
    }))?;
    for i in 0..opts.workers {
        let id = format!("w{i}");
        children.spawn(&mut worker_command(WorkerArgs {
            exe: &opts.worker_exe,
            cluster: &cluster,
            project,
            id: &id,
            mode: WorkerMode::Train,
            seed: opts.seed.wrapping_mul(1000).wrapping_add(i as u64),
            test_set: None,
        }))?;
    }
    wait_ready(&cluster, project, opts.workers, &mut children, opts.join_timeout)?;
    let end = Instant::now() + Duration::from_secs_f64(opts.iterations as f64 * opts.period_s * 3.0 + 60.0);
    let rows = loop {
        children.check_alive()?;
        let history = cluster.client().history(project, 0)?;
        let rows = convergence_rows(&history);
        if rows.last().is_some_and(|r| r.iteration >= opts.iterations) {
            break rows;
        }
        if Instant::now() > end {
            bail!("no tracker result for iteration {} in time", opts.iterations);
        }
        std::thread::sleep(Duration::from_millis(200));
    };
    children.kill_all();
    cluster.shutdown();
    Ok(rows)
}

pub fn write_csv<T: Serialize>(rows: &[T], out: Option<&Path>) -> Result<()> {
    let sink: Box<dyn std::io::Write> = match out {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

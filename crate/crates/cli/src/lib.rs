//! The `gradloom` command line.

pub mod bench;
pub mod idx;

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gradloom_core::coordinator::ProjectConfig;
use gradloom_core::datastore::{decode_item, read_labelled_dir, read_labelled_zip, DataStore, ItemFormat, MLB1_MAGIC};
use gradloom_core::nn::{Hyperparams, ModelArchive, NetworkSpec};
use gradloom_core::protocol::WorkerMode;
use gradloom_core::worker::decode_labelled;
use gradloom_node::{datastore_router, Client, Coordinator, CoordinatorConfig, RunningServer, WorkerExit, WorkerOptions};

#[derive(Debug, Parser)]
#[command(name = "gradloom", version, about = "Synchronised map-reduce SGD over a coordinator and workers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a coordinator.
    Coordinator {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a datastore serving datasets under a directory.
    Datastore {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = "GRADLOOM_DATASTORE_PORT", default_value_t = 8601)]
        port: u16,
    },
    /// Join a project as a worker.
    Worker(WorkerArgs),
    /// Manage projects on a coordinator.
    Project {
        #[command(subcommand)]
        action: ProjectAction,
    },
    /// Upload datasets and attach them to projects.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Save, load and apply model archives.
    Model {
        #[command(subcommand)]
        action: ModelAction,
    },
    /// Run a benchmark and write CSV.
    Bench {
        #[command(subcommand)]
        action: BenchAction,
    },
    /// Convert IDX image and label files to a zip for ingestion.
    ConvertIdx {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "png")]
        format: idx::ItemKind,
        /// Keep only the first N items.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Write a zip of generated cluster data.
    Synth {
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        dims: usize,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Noise stream; use different values for train and test sets.
        #[arg(long, default_value_t = 0)]
        stream: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct WorkerArgs {
    /// Coordinator WebSocket URL, e.g. ws://127.0.0.1:8600/ws
    #[arg(long)]
    pub coordinator: String,
    #[arg(long)]
    pub datastore: Option<String>,
    #[arg(long)]
    pub project: String,
    #[arg(long)]
    pub id: String,
    #[arg(long, default_value = "train")]
    pub mode: WorkerMode,
    #[arg(long, default_value_t = 3000)]
    pub capacity: u64,
    /// Ids per shard request.
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    /// Labelled test set (zip or `{label}/{file}` directory) for track mode.
    #[arg(long)]
    pub test_set: Option<PathBuf>,
    /// Directory of items to classify in predict mode.
    #[arg(long)]
    pub inputs: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum ProjectAction {
    /// Create a project from a ProjectConfig JSON file.
    Create {
        #[arg(long)]
        coordinator: String,
        #[arg(long)]
        config: PathBuf,
    },
    List {
        #[arg(long)]
        coordinator: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum DatasetAction {
    /// Upload a zip to a datastore.
    Upload {
        #[arg(long)]
        datastore: String,
        #[arg(long)]
        id: String,
        zip: PathBuf,
    },
    /// Register a datastore dataset with a project.
    Register {
        #[arg(long)]
        coordinator: String,
        #[arg(long)]
        project: String,
        #[arg(long)]
        id: String,
        /// Defaults to the coordinator's configured datastore.
        #[arg(long)]
        datastore: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ModelAction {
    /// Write a project's current model archive.
    Save {
        #[arg(long)]
        coordinator: String,
        #[arg(long)]
        project: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Start a new project from an archive.
    Load {
        #[arg(long)]
        coordinator: String,
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        project: String,
        #[arg(long = "period", default_value_t = 2.0)]
        period_s: f64,
    },
    /// Classify PNG or MLB1 files with an archive, or with a live project.
    Predict {
        #[arg(long, conflicts_with_all = ["coordinator", "project"])]
        archive: Option<PathBuf>,
        #[arg(long, requires = "project")]
        coordinator: Option<String>,
        #[arg(long)]
        project: Option<String>,
        #[arg(required = true)]
        items: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct CommonBench {
    /// Training zip.
    #[arg(long)]
    pub train: PathBuf,
    /// NetworkSpec JSON.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long = "period", default_value_t = 2.0)]
    pub period_s: f64,
    #[arg(long, default_value_t = 0.01)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    pub l2_decay: f64,
    /// CSV output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl CommonBench {
    fn hyper(&self) -> Hyperparams {
        Hyperparams {
            learning_rate: self.learning_rate,
            l2_decay: self.l2_decay,
            ..Hyperparams::default()
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum BenchAction {
    /// Power and latency for growing numbers of workers.
    Scaling {
        #[command(flatten)]
        common: CommonBench,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        workers: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        iterations: u64,
        #[arg(long, default_value_t = 5)]
        warmup: u64,
    },
    /// Tracker test error over iterations.
    Convergence {
        #[command(flatten)]
        common: CommonBench,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long, default_value_t = 100)]
        iterations: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Reads a NetworkSpec JSON file.
pub fn read_spec(path: &Path) -> Result<NetworkSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(NetworkSpec::from_json_value(&value)?)
}

/// Labelled items from a zip file or a `{label}/{file}` directory.
pub fn read_labelled(path: &Path) -> Result<Vec<(String, gradloom_core::nn::Tensor<f64>)>> {
    let items = if path.is_dir() {
        read_labelled_dir(path)?
    } else {
        read_labelled_zip(&std::fs::read(path).with_context(|| format!("reading {}", path.display()))?)?
    };
    Ok(decode_labelled(&items)?)
}

fn format_of(bytes: &[u8]) -> ItemFormat {
    if bytes.starts_with(MLB1_MAGIC) {
        ItemFormat::Mlb1
    } else {
        ItemFormat::Png
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn worker_options(a: &WorkerArgs) -> Result<WorkerOptions> {
    let mut o = WorkerOptions::new(&a.coordinator, &a.project, &a.id);
    o.datastore_url = a.datastore.clone();
    o.mode = a.mode;
    o.capacity = a.capacity;
    o.fetch_batch = a.batch;
    o.seed = a.seed;
    if let Some(t) = &a.test_set {
        o.test_set = read_labelled(t)?;
    } else if a.mode == WorkerMode::Track {
        bail!("track mode needs --test-set");
    }
    if let Some(dir) = &a.inputs {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        paths.sort();
        for p in paths.into_iter().filter(|p| p.is_file()) {
            let bytes = std::fs::read(&p)?;
            let x = decode_item(&bytes, format_of(&bytes)).with_context(|| format!("decoding {}", p.display()))?;
            o.inputs.push((p.display().to_string(), x));
        }
    }
    Ok(o)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Coordinator { config } => {
            let config = CoordinatorConfig::load(&config)?;
            runtime()?.block_on(async {
                let c = Coordinator::start(config).await?;
                println!("coordinator listening on {}", c.http_url());
                tokio::select! {
                    r = c.wait() => r?,
                    _ = tokio::signal::ctrl_c() => {}
                }
                Ok(())
            })
        }
        Command::Datastore { dir, host, port } => {
            let store = std::sync::Arc::new(DataStore::open(&dir)?);
            tracing::info!(datasets = store.datasets().len(), dir = %dir.display(), "datastore opened");
            runtime()?.block_on(async {
                let s = RunningServer::bind(&host, port, datastore_router(store))
                    .await
                    .with_context(|| format!("binding {host}:{port}"))?;
                println!("datastore listening on {}", s.http_url());
                tokio::select! {
                    r = s.wait() => r?,
                    _ = tokio::signal::ctrl_c() => {}
                }
                Ok(())
            })
        }
        Command::Worker(args) => {
            let options = worker_options(&args)?;
            let status = std::sync::Arc::new(std::sync::Mutex::new(Default::default()));
            let exit = runtime()?.block_on(gradloom_node::run_worker(options, status))?;
            match exit {
                WorkerExit::Bye(reason) => tracing::info!("worker finished: {reason}"),
                WorkerExit::Disconnected => tracing::info!("worker finished: disconnected"),
            }
            Ok(())
        }
        Command::Project { action } => match action {
            ProjectAction::Create { coordinator, config } => {
                let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
                let config: ProjectConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
                print_json(&Client::new(&coordinator).create_project(&config)?)
            }
            ProjectAction::List { coordinator } => print_json(&Client::new(&coordinator).projects()?),
        },
        Command::Dataset { action } => match action {
            DatasetAction::Upload { datastore, id, zip } => {
                let bytes = std::fs::read(&zip).with_context(|| format!("reading {}", zip.display()))?;
                let m = Client::new(&datastore).upload_dataset(&id, &bytes)?;
                print_json(&serde_json::json!({
                    "dataset_id": m.dataset_id,
                    "items": m.entries.len(),
                    "labels": m.label_set,
                    "skipped": m.skipped,
                }))
            }
            DatasetAction::Register {
                coordinator,
                project,
                id,
                datastore,
            } => print_json(&Client::new(&coordinator).register_dataset(&project, &id, datastore.as_deref())?),
        },
        Command::Model { action } => match action {
            ModelAction::Save {
                coordinator,
                project,
                out,
            } => {
                let (archive, text) = Client::new(&coordinator).snapshot(&project)?;
                std::fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
                eprintln!("saved iteration {} to {}", archive.iteration, out.display());
                Ok(())
            }
            ModelAction::Load {
                coordinator,
                archive,
                project,
                period_s,
            } => {
                let text = std::fs::read(&archive).with_context(|| format!("reading {}", archive.display()))?;
                let body = Client::new(&coordinator).post_bytes(
                    &format!("/projects?project_id={project}&T_seconds={period_s}"),
                    "application/json",
                    &text,
                )?;
                let summary: serde_json::Value = serde_json::from_slice(&body)?;
                print_json(&summary)
            }
            ModelAction::Predict {
                archive,
                coordinator,
                project,
                items,
            } => {
                let local = match &archive {
                    Some(path) => {
                        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                        Some(ModelArchive::from_json(&text)?)
                    }
                    None => None,
                };
                let remote = match (&coordinator, &project) {
                    (Some(c), Some(p)) => Some((Client::new(c), p.clone())),
                    _ => None,
                };
                if local.is_none() && remote.is_none() {
                    bail!("give --archive or --coordinator with --project");
                }
                for path in items {
                    let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
                    let (label, probability) = match (&local, &remote) {
                        (Some((archive, network)), _) => {
                            let x = decode_item(&bytes, format_of(&bytes))?;
                            gradloom_core::worker::predict(network, &archive.params, &x)?
                        }
                        (None, Some((client, project))) => {
                            let p = client.predict(project, &bytes)?;
                            (p.label, p.probability)
                        }
                        (None, None) => unreachable!(),
                    };
                    println!(
                        "{}",
                        serde_json::json!({ "file": path.display().to_string(), "label": label, "probability": probability })
                    );
                }
                Ok(())
            }
        },
        Command::Bench { action } => {
            let exe = std::env::current_exe()?;
            match action {
                BenchAction::Scaling {
                    common,
                    workers,
                    iterations,
                    warmup,
                } => {
                    let rows = bench::scaling(&bench::ScalingOptions {
                        train_zip: common.train.clone(),
                        spec: read_spec(&common.spec)?,
                        hyper: common.hyper(),
                        worker_counts: workers,
                        warmup,
                        iterations,
                        period_s: common.period_s,
                        worker_exe: exe,
                        join_timeout: Duration::from_secs(180),
                    })?;
                    bench::write_csv(&rows, common.out.as_deref())
                }
                BenchAction::Convergence {
                    common,
                    test,
                    workers,
                    iterations,
                    seed,
                } => {
                    let rows = bench::convergence(&bench::ConvergenceOptions {
                        train_zip: common.train.clone(),
                        test_zip: test,
                        spec: read_spec(&common.spec)?,
                        hyper: common.hyper(),
                        workers,
                        iterations,
                        period_s: common.period_s,
                        seed,
                        worker_exe: exe,
                        join_timeout: Duration::from_secs(180),
                    })?;
                    bench::write_csv(&rows, common.out.as_deref())
                }
            }
        }
        Command::ConvertIdx {
            images,
            labels,
            out,
            format,
            limit,
        } => {
            let zip = idx::convert(&images, &labels, format, limit)?;
            std::fs::write(&out, zip).with_context(|| format!("writing {}", out.display()))?;
            Ok(())
        }
        Command::Synth {
            classes,
            dims,
            count,
            seed,
            stream,
            out,
        } => {
            if classes == 0 || dims == 0 {
                bail!("classes and dims must be positive");
            }
            let zip = gradloom_node::synthetic::Clusters::new(classes, dims, seed).zip(count, stream)?;
            std::fs::write(&out, zip).with_context(|| format!("writing {}", out.display()))?;
            Ok(())
        }
    }
}

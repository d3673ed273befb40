//! The `hydra` command line.

use std::collections::BTreeSet;
use std::error::Error;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use hydra_core::analytics::{
    build_ecm, build_log_digest, select_default_thresholds, status_metrics, training_diff, Evaluator,
    DEFAULT_DIGEST_WINDOW,
};
use hydra_core::image::Image;
use hydra_core::ingest::{parse_filename, Feeder, FeederConfig};
use hydra_core::keeper::{AlarmHub, KeeperConfig};
use hydra_core::layout::ImageRoot;
use hydra_core::pipeline::{Pipeline, PipelineConfig};
use hydra_core::predict::train::{train_reference, TrainParams};
use hydra_core::predict::{ClassifierBackend, ReferenceBackend};
use hydra_core::sim::{generate_stream, read_ground_truth, run_experiment, ExperimentConfig, FailureSchedule, StreamSpec};
use hydra_core::store::{FileStore, HistoryQuery, Store, StoreError};
use hydra_core::*;
use serde::Serialize;

use crate::config::{ApiConfig, PollHints, DB_ENV, DEFAULT_LISTEN, IMAGE_ROOT_ENV};
use crate::routes::{router, AppState};

type CliResult<T = ()> = Result<T, Box<dyn Error + Send + Sync>>;

#[derive(Debug, Parser)]
#[command(name = "hydra", version, about = "Data-quality monitoring for streamed detector plots")]
pub struct Cli {
    /// Store directory.
    #[arg(long, global = true, env = DB_ENV)]
    pub db: Option<PathBuf>,
    /// Root for stored images and heatmaps.
    #[arg(long, global = true, env = IMAGE_ROOT_ENV)]
    pub image_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create an empty store.
    InitSchema,
    #[command(subcommand)]
    PlotType(PlotTypeCommand),
    /// Register simulator frames and label them from their ground truth.
    LabelImport(LabelImportArgs),
    /// Train a reference model on every labeled image of a plot type.
    Train(TrainArgs),
    /// Watch an input directory and run the whole pipeline over it.
    Feeder(FeederArgs),
    #[command(subcommand)]
    Analytics(AnalyticsCommand),
    /// Write a synthetic frame stream and its ground truth.
    Simulate(SimulateArgs),
    /// Train, stream and evaluate in one go on synthetic data.
    Experiment(ExperimentArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum PlotTypeCommand {
    Add(PlotTypeAddArgs),
    List,
}

#[derive(Debug, Args)]
pub struct PlotTypeAddArgs {
    #[arg(long)]
    pub name: String,
    #[arg(long)]
    pub width: u32,
    #[arg(long)]
    pub height: u32,
    #[arg(long, default_value_t = 1)]
    pub channels: u8,
    /// `Name:good|bad|other[:#rrggbb]`, in model output order. Repeatable.
    #[arg(long = "label", required = true)]
    pub labels: Vec<String>,
    /// Users allowed to label, activate models and edit thresholds.
    #[arg(long = "labeler")]
    pub labelers: Vec<String>,
}

#[derive(Debug, Args)]
pub struct LabelImportArgs {
    #[arg(long)]
    pub plot_type: String,
    /// `ground_truth.csv` written by `simulate`.
    #[arg(long)]
    pub ground_truth: PathBuf,
    /// Directory holding the frames; defaults to the CSV's directory.
    #[arg(long)]
    pub dir: Option<PathBuf>,
    #[arg(long)]
    pub user: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub plot_type: String,
    /// Where model artifacts are written; defaults to `<db>/models`.
    #[arg(long)]
    pub models_dir: Option<PathBuf>,
    #[arg(long, default_value_t = TrainParams::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainParams::default().learning_rate)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = TrainParams::default().num_kernels)]
    pub kernels: usize,
    /// Share of confirmed-Good images the keeper retains.
    #[arg(long, default_value_t = 0.1)]
    pub collect_percentage: f64,
    #[arg(long)]
    pub activate: bool,
    /// Replace the default thresholds with ones chosen on the labeled set.
    #[arg(long)]
    pub select_thresholds: bool,
}

#[derive(Debug, Args)]
pub struct FeederArgs {
    #[arg(long)]
    pub input_dir: PathBuf,
    #[arg(long)]
    pub reject_dir: PathBuf,
    /// Holds the processed-file log and dead letters; defaults to `<db>/feeder`.
    #[arg(long)]
    pub state_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub poll_ms: u64,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    /// Seed for the keeper's random sampling; random when unset.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Exit once nothing new has been recorded for this long.
    #[arg(long)]
    pub until_idle_ms: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum AnalyticsCommand {
    /// Confusion matrix over every labeled image.
    Ecm(ModelArgs),
    /// Choose and store per-label thresholds from the labeled set.
    Thresholds(ModelArgs),
    /// Training images the model disagrees with.
    Diff(ModelArgs),
    /// Per-stage latency histograms.
    Status(WindowArgs),
    /// Confirmed-Bad and unconfirmed inferences, newest first.
    Log(WindowArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub model: u64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct WindowArgs {
    /// Trailing window in seconds.
    #[arg(long)]
    pub window: Option<u64>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub plot_type: String,
    #[arg(long)]
    pub frames: u64,
    /// TOML failure schedule; no failures when unset.
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub width: u32,
    #[arg(long, default_value_t = 32)]
    pub height: u32,
    #[arg(long, default_value_t = 1)]
    pub run: u64,
    #[arg(long, default_value_t = 1000)]
    pub interval_ms: i64,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// TOML experiment configuration; built-in defaults when unset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = crate::config::LISTEN_ENV, default_value = DEFAULT_LISTEN)]
    pub listen: SocketAddr,
    /// Static files served for any path the API does not claim.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

/// Parses the process arguments and runs the command.
pub fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}

pub fn run(cli: Cli) -> CliResult {
    let paths = Paths { db: cli.db, image_root: cli.image_root };
    match cli.command {
        Command::InitSchema => {
            let db = paths.db()?;
            FileStore::init(db)?;
            println!("initialized {}", db.display());
            Ok(())
        }
        Command::PlotType(PlotTypeCommand::Add(args)) => plot_type_add(&paths, args),
        Command::PlotType(PlotTypeCommand::List) => plot_type_list(&paths),
        Command::LabelImport(args) => label_import(&paths, args),
        Command::Train(args) => train(&paths, args),
        Command::Feeder(args) => feeder(&paths, args),
        Command::Analytics(cmd) => analytics(&paths, cmd),
        Command::Simulate(args) => simulate(args),
        Command::Experiment(args) => experiment(args),
        Command::Serve(args) => serve(&paths, args),
    }
}

struct Paths {
    db: Option<PathBuf>,
    image_root: Option<PathBuf>,
}

impl Paths {
    fn db(&self) -> CliResult<&Path> {
        self.db.as_deref().ok_or_else(|| format!("--db or {DB_ENV} is required").into())
    }

    fn image_root(&self) -> CliResult<ImageRoot> {
        let root = self.image_root.as_deref().ok_or_else(|| format!("--image-root or {IMAGE_ROOT_ENV} is required"))?;
        Ok(ImageRoot::new(root))
    }

    fn store(&self) -> CliResult<Arc<FileStore>> {
        Ok(Arc::new(FileStore::open(self.db()?)?))
    }
}

fn lookup_plot_type(store: &dyn Store, name: &str) -> CliResult<PlotType> {
    Ok(crate::routes::resolve_plot_type(store, name)?)
}

/// Parses `Name:severity[:#rrggbb]`.
pub fn parse_label_spec(text: &str) -> Result<LabelSpec, String> {
    let mut parts = text.split(':');
    let name = parts.next().filter(|n| !n.is_empty()).ok_or_else(|| format!("{text:?}: missing label name"))?;
    let severity = match parts.next().map(str::to_ascii_lowercase).as_deref() {
        Some("good") => Severity::Good,
        Some("bad") => Severity::Bad,
        Some("other") => Severity::Other,
        _ => return Err(format!("{text:?}: severity must be good, bad or other")),
    };
    let color = match parts.next() {
        Some(hex) => parse_hex(hex).ok_or_else(|| format!("{text:?}: colour must be #rrggbb"))?,
        None => match severity {
            Severity::Good => Rgb::GREEN,
            Severity::Bad => Rgb::RED,
            Severity::Other => Rgb::AMBER,
        },
    };
    if parts.next().is_some() {
        return Err(format!("{text:?}: too many fields"));
    }
    Ok(LabelSpec::new(name, color, severity))
}

fn parse_hex(s: &str) -> Option<Rgb> {
    let s = s.strip_prefix('#')?;
    if s.len() != 6 || !s.is_ascii() {
        return None;
    }
    let byte = |i: usize| u8::from_str_radix(&s[i..i + 2], 16).ok();
    Some(Rgb(byte(0)?, byte(2)?, byte(4)?))
}

fn plot_type_add(paths: &Paths, args: PlotTypeAddArgs) -> CliResult {
    let labels = args.labels.iter().map(|l| parse_label_spec(l)).collect::<Result<Vec<_>, _>>()?;
    let store = paths.store()?;
    let (pt, labels) = store.register_plot_type(NewPlotType {
        name: args.name,
        input_width: args.width,
        input_height: args.height,
        channels: args.channels,
        labels,
        allowed_labelers: args.labelers.into_iter().collect::<BTreeSet<_>>(),
    })?;
    println!("plot_type id={} name={}", pt.plot_type_id, pt.name);
    for l in labels {
        println!("label id={} name={} severity={:?}", l.label_id, l.name, l.severity);
    }
    Ok(())
}

fn plot_type_list(paths: &Paths) -> CliResult {
    let store = paths.store()?;
    for pt in store.plot_types()? {
        let labels: Vec<String> = store.labels(pt.plot_type_id)?.into_iter().map(|l| l.name).collect();
        let active = store.active_model(pt.plot_type_id)?.map_or("-".to_string(), |m| m.model_id.to_string());
        println!(
            "plot_type id={} name={} input={} labels={} active_model={}",
            pt.plot_type_id,
            pt.name,
            InputShape::of(&pt),
            labels.join(","),
            active
        );
    }
    Ok(())
}

fn label_import(paths: &Paths, args: LabelImportArgs) -> CliResult {
    let store = paths.store()?;
    let root = paths.image_root()?;
    let pt = lookup_plot_type(store.as_ref(), &args.plot_type)?;
    if !pt.allowed_labelers.contains(&args.user) {
        return Err(StoreError::PermissionDenied { user: args.user, plot_type_id: pt.plot_type_id }.into());
    }
    let labels = store.labels(pt.plot_type_id)?;
    let dir = match &args.dir {
        Some(d) => d.clone(),
        None => args.ground_truth.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let now = SystemClock.now();
    let (mut registered, mut labeled) = (0usize, 0usize);
    for row in read_ground_truth(&args.ground_truth)? {
        let label = labels
            .iter()
            .find(|l| l.name == row.truth.as_str())
            .ok_or_else(|| format!("plot type {} has no label named {}", pt.name, row.truth.as_str()))?;
        let fields = parse_filename(&row.file)?;
        let image = match store.image_by_key(pt.plot_type_id, fields.run_number, fields.sequence)? {
            Some(image) => image,
            None => {
                let src = dir.join(&row.file);
                let decoded = Image::load(&src)?;
                let storage_path = ImageRoot::image_path(&pt.name, fields.run_number, &row.file);
                let dest = root.resolve(&storage_path);
                if let Some(parent) = dest.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                std::fs::copy(&src, &dest)?;
                registered += 1;
                store.register_image(NewImage {
                    plot_type_id: pt.plot_type_id,
                    run_number: fields.run_number,
                    sequence: fields.sequence,
                    capture_time: Timestamp(fields.capture_time_ms),
                    storage_path,
                    width: decoded.width(),
                    height: decoded.height(),
                })?
            }
        };
        if store.current_label(image.image_id)?.map(|a| a.label_id) != Some(label.label_id) {
            store.assign_label(image.image_id, label.label_id, &args.user, now)?;
            labeled += 1;
        }
    }
    println!("label-import plot_type={} registered={registered} labeled={labeled}", pt.name);
    Ok(())
}

fn train(paths: &Paths, args: TrainArgs) -> CliResult {
    let store = paths.store()?;
    let root = paths.image_root()?;
    let pt = lookup_plot_type(store.as_ref(), &args.plot_type)?;
    let now = SystemClock.now();
    let members: Vec<(ImageId, LabelId)> = store
        .query_labeled(pt.plot_type_id, None, None)?
        .into_iter()
        .map(|(img, a)| (img.image_id, a.label_id))
        .collect();
    if members.is_empty() {
        return Err(format!("plot type {} has no labeled images", pt.name).into());
    }
    let set = store.create_training_set(pt.plot_type_id, members.clone(), "all-labeled", now)?;
    let models_dir = match args.models_dir {
        Some(d) => d,
        None => paths.db()?.join("models"),
    };
    let params = TrainParams { epochs: args.epochs, learning_rate: args.learning_rate, seed: args.seed, num_kernels: args.kernels };
    let trained = train_reference(
        store.as_ref(),
        &root,
        &models_dir,
        set.training_set_id,
        params,
        args.collect_percentage,
        now,
    )?;
    let model = trained.record;
    println!(
        "model id={} plot_type={} training_set={} images={} accuracy={} final_loss={} artifact={}",
        model.model_id,
        pt.name,
        set.training_set_id,
        members.len(),
        trained.training_accuracy,
        trained.losses.last().copied().unwrap_or(f64::NAN),
        model.artifact_path.display()
    );
    if args.select_thresholds {
        let eval = Evaluator { store: store.as_ref(), backend: &ReferenceBackend, image_root: &root };
        print!("{}", select_default_thresholds(&eval, model.model_id, &members)?.to_text());
    }
    if args.activate {
        let previous = store.set_active_model(model.model_id)?;
        println!(
            "activated model={} previous={}",
            model.model_id,
            previous.map_or("-".to_string(), |p| p.to_string())
        );
    }
    Ok(())
}

fn feeder(paths: &Paths, args: FeederArgs) -> CliResult {
    let store = paths.store()?;
    let root = paths.image_root()?;
    let db = paths.db()?;
    let state_dir = args.state_dir.unwrap_or_else(|| db.join("feeder"));
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let mut keeper = KeeperConfig::new(root.clone(), state_dir.join("dead"));
    if let Some(seed) = args.seed {
        keeper = keeper.with_seed(seed);
    }
    let feeder = Feeder::open(
        FeederConfig {
            input_dir: args.input_dir,
            reject_dir: args.reject_dir,
            image_root: root,
            state_dir,
            poll_interval: Duration::from_millis(args.poll_ms),
        },
        store.clone(),
        clock.clone(),
    )?;
    let pipeline = Pipeline::start(
        store.clone(),
        Arc::new(ReferenceBackend),
        clock,
        Arc::new(AlarmHub::new()),
        PipelineConfig::new(args.workers.max(1), keeper),
    );
    let stop = Arc::new(AtomicBool::new(false));
    let interrupted = stop.clone();
    let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    runtime.spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            interrupted.store(true, Ordering::SeqCst);
        }
    });
    let feeder_thread = pipeline.spawn_feeder(feeder, stop.clone());

    let recorded = |store: &FileStore| store.query_history(&HistoryQuery::default()).map(|h| h.len());
    let start = recorded(&store)?;
    let (mut seen, mut last_change) = (start, Instant::now());
    while !stop.load(Ordering::SeqCst) && !feeder_thread.is_finished() {
        std::thread::sleep(Duration::from_millis(args.poll_ms.clamp(10, 200)));
        let now = recorded(&store)?;
        if now != seen {
            seen = now;
            last_change = Instant::now();
        }
        if args.until_idle_ms.is_some_and(|idle| last_change.elapsed() >= Duration::from_millis(idle)) {
            break;
        }
    }
    stop.store(true, Ordering::SeqCst);
    let fed = feeder_thread.join().map_err(|_| "feeder thread panicked")?;
    let stats = pipeline.shutdown();
    let recorded = recorded(&store)? - start;
    println!(
        "feeder recorded={recorded} dispatched={} dead_lettered={}",
        stats.balancer.dispatched, stats.keeper.dead_lettered
    );
    fed?;
    Ok(())
}

fn emit<T: Serialize>(value: &T, json: bool, text: impl FnOnce(&T) -> String) -> CliResult {
    if json {
        println!("{}", serde_json::to_string_pretty(value)?);
    } else {
        print!("{}", text(value));
    }
    Ok(())
}

fn analytics(paths: &Paths, cmd: AnalyticsCommand) -> CliResult {
    let store = paths.store()?;
    let now = SystemClock.now();
    match &cmd {
        AnalyticsCommand::Status(w) => {
            let window = TimeRange::trailing(now, w.window.map_or(crate::routes::DEFAULT_STATUS_WINDOW, Duration::from_secs));
            emit(&status_metrics(store.as_ref(), window)?, w.json, |r| r.to_text())
        }
        AnalyticsCommand::Log(w) => {
            let window = TimeRange::trailing(now, w.window.map_or(DEFAULT_DIGEST_WINDOW, Duration::from_secs));
            emit(&build_log_digest(store.as_ref(), window)?, w.json, |r| r.to_text())
        }
        AnalyticsCommand::Ecm(m) | AnalyticsCommand::Thresholds(m) | AnalyticsCommand::Diff(m) => {
            let root = paths.image_root()?;
            let backend: Arc<dyn ClassifierBackend> = Arc::new(ReferenceBackend);
            let eval = Evaluator { store: store.as_ref(), backend: backend.as_ref(), image_root: &root };
            let model = store.model(ModelId(m.model))?;
            let set = eval.labeled_set(model.plot_type_id)?;
            match &cmd {
                AnalyticsCommand::Ecm(_) => emit(&build_ecm(&eval, model.model_id, &set)?, m.json, |r| r.to_text()),
                AnalyticsCommand::Thresholds(_) => {
                    emit(&select_default_thresholds(&eval, model.model_id, &set)?, m.json, |r| r.to_text())
                }
                _ => {
                    let set = match model.training_set_id {
                        Some(ts) => {
                            let members: Vec<ImageId> = store.training_set(ts)?.members.iter().map(|m| m.0).collect();
                            eval.with_current_labels(&members)?
                        }
                        None => set,
                    };
                    emit(&training_diff(&eval, model.model_id, &set)?, m.json, |r| r.to_text())
                }
            }
        }
    }
}

fn simulate(args: SimulateArgs) -> CliResult {
    let schedule = match &args.schedule {
        Some(path) => FailureSchedule::load(path)?,
        None => FailureSchedule::default(),
    };
    let mut spec = StreamSpec::new(args.plot_type, args.width, args.height, args.seed);
    spec.run_number = args.run;
    spec.interval_ms = args.interval_ms;
    let rows = generate_stream(&spec, args.frames, &schedule, &args.out)?;
    let bad = rows.iter().filter(|r| r.truth != hydra_core::sim::Truth::Good).count();
    println!("simulate frames={} bad={bad} out={}", rows.len(), args.out.display());
    Ok(())
}

fn experiment(args: ExperimentArgs) -> CliResult {
    let cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    emit(&run_experiment(&cfg)?, args.json, |r| r.to_text())
}

fn serve(paths: &Paths, args: ServeArgs) -> CliResult {
    let db = paths.db()?;
    let mut config = ApiConfig::new(db, paths.image_root()?.path());
    config.listen = args.listen;
    config.static_dir = args.static_dir;
    config.validate()?;
    let store: Arc<dyn Store> = Arc::new(FileStore::open_with_clock(&config.db_path, Arc::new(SystemClock), config.retention)?);
    let state = AppState {
        store,
        image_root: ImageRoot::new(&config.image_root),
        backend: Arc::new(ReferenceBackend),
        clock: Arc::new(SystemClock),
        hints: PollHints::default(),
    };
    let app = router(state, config.static_dir.as_deref());
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(config.listen).await?;
        tracing::info!(addr = %listener.local_addr()?, "listening");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use metalabel::charts::{instance_charts, probe_chart};
use metalabel::dataset::{ingest_omniglot, split_classes, synth_glyphs, ClassSplit, DatasetCache};
use metalabel::eval::{
    parse_metrics_csv, run_probe, run_sweep, sweep_csv, CsvSink, MetricsRecord, MetricsSink, ProbeResult,
    SWEEP_CSV_HEADER,
};
use metalabel::model::QNetParams;
use metalabel::tensor::Rng;
use metalabel::trainer::{bellman_gradcheck, evaluate, train, train_supervised, TrainConfig};
use metalabel::Error;

const DATA_DIR_VAR: &str = "METALABEL_DATA_DIR";
const DEFAULT_CACHE: &str = "omniglot.bin";
const DEFAULT_RAW: &str = "omniglot";
const MANIFEST: &str = "manifest.json";
const GRADCHECK_TOLERANCE: f64 = 1e-5;
const GRADCHECK_HIDDEN: [usize; 3] = [4, 8, 16];

#[derive(Parser)]
#[command(name = "metalabel", version, about = "Active one-shot labeling with a recurrent Q-network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert an Omniglot image tree into a dataset cache.
    Ingest(IngestArgs),
    /// Partition a cache's classes into train and test sets.
    Split(SplitArgs),
    /// Generate a synthetic glyph dataset cache.
    Synth(SynthArgs),
    /// Train the Q-network.
    Train(TrainArgs),
    /// Train the supervised baseline.
    TrainSupervised(TrainArgs),
    /// Greedy evaluation of saved weights on the test classes.
    Eval(EvalArgs),
    /// Request rate around a class switch.
    Probe(ProbeArgs),
    /// One training run per incorrect-prediction reward.
    Sweep(SweepArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Render SVG charts from metrics and probe CSVs.
    Charts(ChartsArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Image tree root [default: $METALABEL_DATA_DIR/omniglot]
    #[arg(long)]
    src: Option<PathBuf>,
    /// Cache file [default: $METALABEL_DATA_DIR/omniglot.bin]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1200)]
    n_train: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 130)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    examples: usize,
}

/// Where the data comes from. A missing split file means "split the
/// dataset with `split_seed`, keeping `n_train` classes for training".
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DataSource {
    dataset: Option<PathBuf>,
    split: Option<PathBuf>,
    split_seed: u64,
    n_train: Option<usize>,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset cache [default: $METALABEL_DATA_DIR/omniglot.bin]
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Split file; generated when absent
    #[arg(long)]
    split: Option<PathBuf>,
    /// Train classes when generating a split [default: 1200, or all but 30 for small datasets]
    #[arg(long)]
    n_train: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config, or a manifest from an earlier run
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long)]
    eval_batches: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    rinc: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    params: PathBuf,
    /// Output directory [default: beside the weights]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["5", "10"])]
    prefix: String,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated incorrect-prediction rewards
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-1,-5,-10,-20")]
    rinc: Vec<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long)]
    eval_batches: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write a manifest here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ChartsArgs {
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    probe: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Trailing window in batches
    #[arg(long, default_value_t = 500)]
    window: usize,
}

/// Failure class, mapped to the process exit code.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Numeric(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Data(e) | Failure::Numeric(e) => e,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
            Some(Error::NonFinite { .. }) => Failure::Numeric(e),
            Some(Error::Config(_)) => Failure::Usage(e),
            _ => Failure::Data(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli, argv: &[String]) -> CliResult<()> {
    match cli.command {
        Command::Ingest(a) => cmd_ingest(a, argv),
        Command::Split(a) => cmd_split(a, argv),
        Command::Synth(a) => cmd_synth(a, argv),
        Command::Train(a) => cmd_train(a, argv, false),
        Command::TrainSupervised(a) => cmd_train(a, argv, true),
        Command::Eval(a) => cmd_eval(a, argv),
        Command::Probe(a) => cmd_probe(a, argv),
        Command::Sweep(a) => cmd_sweep(a, argv),
        Command::Gradcheck(a) => cmd_gradcheck(a, argv),
        Command::Charts(a) => cmd_charts(a, argv),
    }
}

fn data_root() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_VAR).map(PathBuf::from)
}

fn default_in_data_root(path: Option<PathBuf>, name: &str, what: &str) -> CliResult<PathBuf> {
    path.or_else(|| data_root().map(|r| r.join(name)))
        .ok_or_else(|| usage(format!("no {what} given and {DATA_DIR_VAR} is not set")))
}

/// `<version>+g<commit>[-dirty]` when built from a git checkout.
fn version_string() -> String {
    let base = env!("CARGO_PKG_VERSION");
    let out = std::process::Command::new("git")
        .args(["-C", env!("CARGO_MANIFEST_DIR"), "describe", "--always", "--dirty", "--abbrev=12"])
        .output();
    match out {
        Ok(o) if o.status.success() => {
            let desc = String::from_utf8_lossy(&o.stdout).trim().to_string();
            format!("{base}+g{desc}")
        }
        _ => base.to_string(),
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    command: String,
    argv: Vec<String>,
    version: String,
    seed: Option<u64>,
    config: Value,
    #[serde(default)]
    data: Option<DataSource>,
    outputs: Vec<String>,
    #[serde(default)]
    results: Value,
    timings: Timings,
}

#[derive(Serialize, Deserialize)]
struct Timings {
    started_unix: f64,
    wall_seconds: f64,
}

struct Run {
    command: &'static str,
    argv: Vec<String>,
    started: Instant,
    started_unix: f64,
}

impl Run {
    fn start(command: &'static str, argv: &[String]) -> Self {
        Run {
            command,
            argv: argv.to_vec(),
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0),
        }
    }

    fn write_manifest(
        &self,
        path: &Path,
        seed: Option<u64>,
        config: Value,
        data: Option<DataSource>,
        outputs: &[&str],
        results: Value,
    ) -> CliResult<()> {
        let m = Manifest {
            command: self.command.to_string(),
            argv: self.argv.clone(),
            version: version_string(),
            seed,
            config,
            data,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            results,
            timings: Timings {
                started_unix: self.started_unix,
                wall_seconds: self.started.elapsed().as_secs_f64(),
            },
        };
        let text = serde_json::to_string_pretty(&m).map_err(anyhow::Error::from)?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// Manifest path for a single-file output: `<file>.manifest.json`.
fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn cmd_ingest(a: IngestArgs, argv: &[String]) -> CliResult<()> {
    let run = Run::start("ingest", argv);
    let src = default_in_data_root(a.src, DEFAULT_RAW, "--src")?;
    let out = default_in_data_root(a.out, DEFAULT_CACHE, "--out")?;
    let dir = parent_dir(&out);
    create_dir(&dir)?;
    let cache = ingest_omniglot(&src, &out).with_context(|| format!("ingesting {}", src.display()))?;
    eprintln!("{} classes, {} images -> {}", cache.class_count(), cache.image_count(), out.display());
    run.write_manifest(
        &sidecar(&out),
        None,
        json!({"src": src, "out": out}),
        None,
        &[&out.display().to_string()],
        json!({"classes": cache.class_count(), "images": cache.image_count()}),
    )
}

fn cmd_split(a: SplitArgs, argv: &[String]) -> CliResult<()> {
    let run = Run::start("split", argv);
    let dataset = default_in_data_root(a.dataset, DEFAULT_CACHE, "--dataset")?;
    let cache = DatasetCache::load(&dataset).with_context(|| format!("loading {}", dataset.display()))?;
    let split = split_classes(&cache, a.seed, a.n_train)?;
    let dir = parent_dir(&a.out);
    create_dir(&dir)?;
    split.save(&a.out)?;
    run.write_manifest(
        &sidecar(&a.out),
        Some(a.seed),
        json!({"dataset": dataset, "n_train": a.n_train}),
        None,
        &[&a.out.display().to_string()],
        json!({"train": split.train_ids.len(), "test": split.test_ids.len()}),
    )
}

fn cmd_synth(a: SynthArgs, argv: &[String]) -> CliResult<()> {
    let run = Run::start("synth", argv);
    let cache = synth_glyphs(&mut Rng::new(a.seed), a.classes, a.examples)?;
    let dir = parent_dir(&a.out);
    create_dir(&dir)?;
    cache.save(&a.out)?;
    run.write_manifest(
        &sidecar(&a.out),
        Some(a.seed),
        json!({"classes": a.classes, "examples": a.examples}),
        None,
        &[&a.out.display().to_string()],
        Value::Null,
    )
}

/// Reads `--config`: a bare training config, or a manifest whose config and
/// data source are reused.
fn load_config(path: Option<&Path>) -> CliResult<(TrainConfig, DataSource)> {
    let Some(path) = path else {
        return Ok((TrainConfig::default(), DataSource::default()));
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let (config, data) = if value.get("command").is_some() && value.get("config").is_some() {
        let m: Manifest =
            serde_json::from_value(value).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        (m.config, m.data.unwrap_or_default())
    } else {
        (value, DataSource::default())
    };
    let config: TrainConfig =
        serde_json::from_value(config).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok((config, data))
}

fn merge_data(mut base: DataSource, args: &DataArgs) -> DataSource {
    if let Some(d) = &args.dataset {
        base.dataset = Some(d.clone());
        base.split = None;
    }
    if let Some(s) = &args.split {
        base.split = Some(s.clone());
    }
    if args.n_train.is_some() {
        base.n_train = args.n_train;
    }
    base
}

/// Loads the cache and resolves the class split, writing a generated split
/// into `out_dir`.
fn load_data(source: &mut DataSource, out_dir: Option<&Path>) -> CliResult<(DatasetCache, ClassSplit)> {
    let dataset = default_in_data_root(source.dataset.clone(), DEFAULT_CACHE, "--dataset")?;
    source.dataset = Some(dataset.clone());
    let cache = DatasetCache::load(&dataset).with_context(|| format!("loading {}", dataset.display()))?;
    let split = match &source.split {
        Some(p) => ClassSplit::load(p).with_context(|| format!("loading split {}", p.display()))?,
        None => {
            let n = cache.class_count();
            let n_train = source.n_train.unwrap_or(if n > 1200 { 1200 } else { n.saturating_sub(30) });
            source.n_train = Some(n_train);
            let split = split_classes(&cache, source.split_seed, n_train)?;
            if let Some(dir) = out_dir {
                let p = dir.join("split.json");
                split.save(&p)?;
            }
            split
        }
    };
    Ok((cache, split))
}

fn apply_overrides(cfg: &mut TrainConfig, a: &TrainArgs) {
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.workers {
        cfg.workers = v;
    }
    if let Some(v) = a.batches {
        cfg.total_batches = v;
    }
    if let Some(v) = a.eval_batches {
        cfg.eval_batches = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.hidden {
        cfg.hidden = v;
    }
    if let Some(v) = a.rinc {
        cfg.episode.rewards.r_inc = v;
    }
}

/// CSV sink that also reports progress and saves the last finite weights
/// before a numerical abort.
struct RunSink {
    csv: CsvSink<BufWriter<File>, BufWriter<File>>,
    dir: PathBuf,
    total: usize,
    window: Vec<MetricsRecord>,
}

impl MetricsSink for RunSink {
    fn record(&mut self, r: &MetricsRecord) -> metalabel::Result<()> {
        self.csv.record(r)?;
        self.window.push(r.clone());
        if (r.batch + 1).is_multiple_of(500) || r.batch + 1 == self.total {
            if let Some(p) = MetricsRecord::pooled(&self.window) {
                let fmt = |v: Option<f64>| v.map_or("-".into(), |x| format!("{x:.3}"));
                eprintln!(
                    "[{}] batch {}/{}: reward {:.3}, requests {:.3}, acc@1 {}, acc@5 {}",
                    p.split,
                    r.batch + 1,
                    self.total,
                    p.mean_reward(),
                    p.request_fraction(),
                    fmt(p.accuracy(1)),
                    fmt(p.accuracy(5))
                );
            }
            self.window.clear();
        }
        Ok(())
    }

    fn snapshot(&mut self, params: &QNetParams, batch: usize) -> metalabel::Result<()> {
        self.csv.flush()?;
        let path = self.dir.join("weights.nan-snapshot.bin");
        params.save(&path)?;
        eprintln!("non-finite values at batch {batch}; last finite weights in {}", path.display());
        Ok(())
    }
}

fn open_sink(dir: &Path, total: usize) -> CliResult<RunSink> {
    let open = |name: &str| -> CliResult<BufWriter<File>> {
        let p = dir.join(name);
        Ok(BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?))
    };
    Ok(RunSink {
        csv: CsvSink::new(open("metrics.csv")?, Some(open("losses.csv")?))?,
        dir: dir.to_path_buf(),
        total,
        window: Vec::new(),
    })
}

fn eval_summary(eval: Option<&MetricsRecord>) -> Value {
    match eval {
        Some(e) => json!({
            "accuracy": e.overall_accuracy(),
            "prediction_accuracy": e.prediction_accuracy(),
            "request_fraction": e.request_fraction(),
            "mean_reward": e.mean_reward(),
            "episodes": e.episodes,
        }),
        None => Value::Null,
    }
}

fn cmd_train(a: TrainArgs, argv: &[String], supervised: bool) -> CliResult<()> {
    let run = Run::start(if supervised { "train-supervised" } else { "train" }, argv);
    let (mut cfg, data) = load_config(a.config.as_deref())?;
    apply_overrides(&mut cfg, &a);
    cfg.validate()?;
    let mut source = merge_data(data, &a.data);
    create_dir(&a.out)?;
    let (cache, split) = load_data(&mut source, Some(&a.out))?;
    let (train_view, test_view) = split.views(&cache)?;
    let mut sink = open_sink(&a.out, cfg.total_batches + cfg.eval_batches)?;
    let config_json = serde_json::to_value(&cfg).map_err(anyhow::Error::from)?;
    let write = |run: &Run, results: Value| {
        run.write_manifest(
            &a.out.join(MANIFEST),
            Some(cfg.seed),
            config_json.clone(),
            Some(source.clone()),
            &["weights.bin", "optimizer.bin", "metrics.csv", "losses.csv"],
            results,
        )
    };

    let outcome = if supervised {
        train_supervised(&cfg, &train_view, &test_view, &mut sink).map(|o| {
            let mut summary = eval_summary(o.eval.as_ref());
            summary["later_accuracy"] = json!(o.later_accuracy);
            summary["label_rate"] = json!(o.label_rate);
            (o.params, o.optimizer, summary)
        })
    } else {
        train(&cfg, &train_view, &test_view, &mut sink).map(|o| (o.params, o.optimizer, eval_summary(o.eval.as_ref())))
    };
    sink.csv.flush()?;
    let (params, optimizer, summary) = match outcome {
        Ok(x) => x,
        Err(e) => {
            write(&run, json!({"error": e.to_string()}))?;
            return Err(e.into());
        }
    };
    params.save(a.out.join("weights.bin"))?;
    optimizer.save(a.out.join("optimizer.bin"))?;
    write(&run, summary.clone())?;
    println!("{}", serde_json::to_string(&summary).map_err(anyhow::Error::from)?);
    Ok(())
}

/// Data source for commands that start from saved weights: the training
/// manifest beside the weights, then flags.
fn weights_data_source(params: &Path, args: &DataArgs) -> CliResult<DataSource> {
    let manifest = parent_dir(params).join(MANIFEST);
    let mut base = DataSource::default();
    if manifest.exists() {
        if let Ok((_, data)) = load_config(Some(&manifest)) {
            base = data;
            if base.split.is_none() && parent_dir(params).join("split.json").exists() {
                base.split = Some(parent_dir(params).join("split.json"));
            }
        }
    }
    Ok(merge_data(base, args))
}

fn cmd_eval(a: EvalArgs, argv: &[String]) -> CliResult<()> {
    let run = Run::start("eval", argv);
    let params = QNetParams::load(&a.params).with_context(|| format!("loading {}", a.params.display()))?;
    let (mut cfg, _) = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    // Without flags, a config's own eval length wins over the 1000-episode default.
    let episodes = match (a.episodes, &a.config) {
        (Some(n), _) => n,
        (None, Some(_)) => cfg.eval_batches.max(1) * cfg.batch_size,
        (None, None) => 1000,
    };
    cfg.eval_batches = episodes.div_ceil(cfg.batch_size);
    cfg.validate()?;
    let mut source = weights_data_source(&a.params, &a.data)?;
    let (cache, split) = load_data(&mut source, None)?;
    let (_, test_view) = split.views(&cache)?;
    create_dir(&a.out)?;
    let batches = cfg.eval_batches;
    let mut sink = open_sink(&a.out, batches)?;
    let pooled = evaluate(
        &params,
        &cfg.episode,
        &test_view,
        batches,
        cfg.batch_size,
        &mut Rng::new(cfg.seed),
        cfg.workers,
        0,
        &mut sink,
    )?;
    sink.csv.flush()?;
    let summary = eval_summary(pooled.as_ref());
    run.write_manifest(
        &a.out.join(MANIFEST),
        Some(cfg.seed),
        serde_json::to_value(&cfg).map_err(anyhow::Error::from)?,
        Some(source),
        &["metrics.csv"],
        summary.clone(),
    )?;
    println!("{}", serde_json::to_string(&summary).map_err(anyhow::Error::from)?);
    Ok(())
}

fn cmd_probe(a: ProbeArgs, argv: &[String]) -> CliResult<()> {
    let run = Run::start("probe", argv);
    let prefix: usize = a.prefix.parse().map_err(usage)?;
    let params = QNetParams::load(&a.params).with_context(|| format!("loading {}", a.params.display()))?;
    let mut source = weights_data_source(&a.params, &a.data)?;
    let (cache, split) = load_data(&mut source, None)?;
    let (_, test_view) = split.views(&cache)?;
    let result = run_probe(&params, &test_view, prefix, a.episodes, &mut Rng::new(a.seed))?;
    let out = a.out.unwrap_or_else(|| parent_dir(&a.params));
    create_dir(&out)?;
    let name = format!("probe_{prefix}.csv");
    fs::write(out.join(&name), result.to_csv()).with_context(|| format!("writing {name}"))?;
    run.write_manifest(
        &out.join(format!("probe_{prefix}.manifest.json")),
        Some(a.seed),
        json!({"prefix": prefix, "episodes": a.episodes, "params": a.params}),
        Some(source),
        &[&name],
        json!({"request_pct": result.request_pct}),
    )?;
    for (t, p) in result.request_pct.iter().enumerate() {
        println!("step {}: {p:.1}% requests", t + 1);
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs, argv: &[String]) -> CliResult<()> {
    let run = Run::start("sweep", argv);
    let (mut cfg, data) = load_config(a.config.as_deref())?;
    let overrides = TrainArgs {
        config: None,
        out: a.out.clone(),
        seed: a.seed,
        workers: a.workers,
        data: DataArgs {
            dataset: None,
            split: None,
            n_train: None,
        },
        batches: a.batches,
        eval_batches: a.eval_batches,
        batch_size: a.batch_size,
        hidden: a.hidden,
        rinc: None,
    };
    apply_overrides(&mut cfg, &overrides);
    cfg.validate()?;
    if a.rinc.is_empty() {
        return Err(usage("--rinc needs at least one value"));
    }
    let mut source = merge_data(data, &a.data);
    create_dir(&a.out)?;
    let (cache, split) = load_data(&mut source, Some(&a.out))?;
    let (train_view, test_view) = split.views(&cache)?;
    println!("{SWEEP_CSV_HEADER}");
    let rows = run_sweep(&cfg, &a.rinc, &train_view, &test_view, |row| {
        let line = sweep_csv(std::slice::from_ref(row));
        print!("{}", line.lines().nth(1).unwrap_or_default().to_owned() + "\n");
        let _ = std::io::stdout().flush();
    });
    fs::write(a.out.join("sweep.csv"), sweep_csv(&rows)).context("writing sweep.csv")?;
    run.write_manifest(
        &a.out.join(MANIFEST),
        Some(cfg.seed),
        serde_json::to_value(&cfg).map_err(anyhow::Error::from)?,
        Some(source),
        &["sweep.csv"],
        serde_json::to_value(&rows).map_err(anyhow::Error::from)?,
    )?;
    if rows.iter().any(|r| r.error.is_some()) {
        return Err(Failure::Data(anyhow!("some sweep runs failed; see sweep.csv")));
    }
    Ok(())
}

fn gradcheck(seed: u64) -> CliResult<f64> {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for h in GRADCHECK_HIDDEN {
        let err = bellman_gradcheck(&mut rng, h, 10, 4, 5, 0.5)?;
        eprintln!("H={h}: max relative error {err:.3e}");
        worst = worst.max(err);
    }
    Ok(worst)
}

fn cmd_gradcheck(a: GradcheckArgs, argv: &[String]) -> CliResult<()> {
    let run = Run::start("gradcheck", argv);
    let worst = gradcheck(a.seed)?;
    println!("max relative error: {worst:.3e}");
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        run.write_manifest(
            &dir.join(MANIFEST),
            Some(a.seed),
            json!({"hidden": GRADCHECK_HIDDEN, "input": 10, "actions": 4, "steps": 5, "tolerance": GRADCHECK_TOLERANCE}),
            None,
            &[],
            json!({"max_relative_error": worst}),
        )?;
    }
    if !(worst <= GRADCHECK_TOLERANCE) {
        return Err(Failure::Numeric(anyhow!(
            "gradient check failed: {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}"
        )));
    }
    Ok(())
}

fn cmd_charts(a: ChartsArgs, argv: &[String]) -> CliResult<()> {
    let run = Run::start("charts", argv);
    if a.metrics.is_none() && a.probe.is_empty() {
        return Err(usage("give --metrics and/or --probe"));
    }
    create_dir(&a.out)?;
    let mut outputs = Vec::new();
    if let Some(path) = &a.metrics {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let rows = parse_metrics_csv(&text)?;
        let (acc, req) = instance_charts(&rows, a.window);
        for (name, chart) in [("accuracy.svg", acc), ("requests.svg", req)] {
            fs::write(a.out.join(name), chart.to_svg()).with_context(|| format!("writing {name}"))?;
            outputs.push(name.to_string());
        }
    }
    if !a.probe.is_empty() {
        let probes = a
            .probe
            .iter()
            .map(|p| {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Ok(ProbeResult::from_csv(&text)?)
            })
            .collect::<CliResult<Vec<_>>>()?;
        fs::write(a.out.join("probe.svg"), probe_chart(&probes).to_svg()).context("writing probe.svg")?;
        outputs.push("probe.svg".into());
    }
    let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    run.write_manifest(
        &a.out.join(MANIFEST),
        None,
        json!({"metrics": a.metrics, "probe": a.probe, "window": a.window}),
        None,
        &refs,
        Value::Null,
    )
}

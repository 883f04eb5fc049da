//! Command-line entry points: ingest, init, train, bench, score, eval, serve.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

use std::io::{BufRead, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use rarematch::bench::{run_bench, seeds_for, BenchConfig, BenchData, Protocol};
use rarematch::catalog::{DatasetCatalog, Label, Split};
use rarematch::labels::{LabelStore, Provenance};
use rarematch::loader::ImageSource;
use rarematch::metrics::{default_curve_points, efficiency_curve, MetricsReport, ScoreTable};
use rarematch::scorer::{score_stream, stderr_progress, ScoreOptions};
use rarematch::session::{select_candidates, ActiveSession, CycleReport, SelectionMode, SessionConfig};
use rarematch::shard::{build_shard_cache, write_cache, ShardCache, ShardShape};
use rarematch::stretch::StretchSpec;
use rarematch::synth::generate;
use rarematch::{backbone, server, Error, Result};

#[derive(Debug, Parser)]
#[command(name = "rarematch", version, about = "Semi-supervised anomaly detection with active learning")]
struct Cli {
    /// JSON file with one object per subcommand, keyed by subcommand name,
    /// whose keys are flag names. Flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Preprocess a catalog into a shard cache.
    Ingest(IngestArgs),
    /// Create a session directory from a catalog and cache, or from a
    /// generated benchmark set.
    Init(InitArgs),
    /// Run active-learning cycles on a session.
    Train(TrainArgs),
    /// Run a simulated labelling protocol over several seeds.
    Bench(BenchArgs),
    /// Score every image of a shard cache with a checkpoint.
    Score(ScoreArgs),
    /// Compute metrics for a score table against ground truth.
    Eval(EvalArgs),
    /// Serve the HTTP API for one session.
    Serve(ServeArgs),
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
struct IngestArgs {
    /// Catalog in JSON-lines form.
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Output cache directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Side length after resizing [default: 64].
    #[arg(long)]
    size: Option<usize>,
    /// linear, log, asinh or zscale [default: linear].
    #[arg(long)]
    stretch: Option<String>,
    /// Images per shard file [default: 1024].
    #[arg(long)]
    shard_size: Option<usize>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
struct InitArgs {
    /// Session directory to create.
    #[arg(long)]
    session: Option<PathBuf>,
    /// Catalog in JSON-lines form (with --cache).
    #[arg(long, conflicts_with = "synthetic")]
    catalog: Option<PathBuf>,
    /// Shard cache built by `ingest`.
    #[arg(long, conflicts_with = "synthetic")]
    cache: Option<PathBuf>,
    /// Seed labels as CSV; defaults to the ground truth of the catalog's
    /// labelled split.
    #[arg(long, conflicts_with = "synthetic")]
    labels: Option<PathBuf>,
    /// Generate a benchmark set instead: miniimagenet-like or galaxymnist-like.
    #[arg(long)]
    synthetic: Option<String>,
    /// Side length of generated images [default: 64].
    #[arg(long)]
    size: Option<usize>,
    /// Training and generation seed [default: 42].
    #[arg(long)]
    seed: Option<u64>,
    /// Iterations per cycle [default: 100].
    #[arg(long)]
    iters: Option<usize>,
    /// Full session configuration as JSON; the flags above override it.
    #[arg(long)]
    session_config: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
struct TrainArgs {
    #[arg(long)]
    session: Option<PathBuf>,
    /// Number of cycles [default: 3].
    #[arg(long)]
    cycles: Option<u32>,
    /// Iterations per cycle; overrides the session setting.
    #[arg(long)]
    iters: Option<usize>,
    /// Label candidates from ground truth instead of prompting.
    #[arg(long)]
    oracle: bool,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
struct BenchArgs {
    /// miniimagenet-like or galaxymnist-like.
    #[arg(long)]
    protocol: Option<String>,
    /// Number of seeds, taken from the fixed seed list [default: 9].
    #[arg(long)]
    seeds: Option<usize>,
    /// Cycles per run; 0 evaluates the untrained model [default: 3].
    #[arg(long)]
    cycles: Option<u32>,
    /// Iterations per cycle [default: 100].
    #[arg(long)]
    iters: Option<usize>,
    /// Seed label count, keeping the protocol's anomaly fraction.
    #[arg(long)]
    initial_labels: Option<usize>,
    /// Anomalies and false positives labelled per cycle [default: 10].
    #[arg(long)]
    per_cycle: Option<usize>,
    /// Side length of generated images [default: 64].
    #[arg(long)]
    size: Option<usize>,
    /// Run on a user catalog with ground truth (with --cache) instead of
    /// generated images.
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long, requires = "catalog")]
    cache: Option<PathBuf>,
    /// Write the per-seed table here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-cycle metrics CSV.
    #[arg(long)]
    cycles_out: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Shard cache directory.
    #[arg(long)]
    shards: Option<PathBuf>,
    /// Size of the ranked top list [default: 1000].
    #[arg(long)]
    topk: Option<usize>,
    /// All scores, in shard order [default: scores.csv].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Top list, in rank order [default: topk.csv].
    #[arg(long)]
    topk_out: Option<PathBuf>,
    /// Worker threads [default: 1].
    #[arg(long)]
    workers: Option<usize>,
    /// Images per forward pass [default: 64].
    #[arg(long)]
    batch: Option<usize>,
    /// Skip unreadable shards instead of failing.
    #[arg(long)]
    skip_invalid: bool,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
struct EvalArgs {
    /// `id,score` CSV.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Catalog with ground-truth labels.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Extra efficiency points, in percent.
    #[arg(long = "at")]
    at: Vec<f64>,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
struct ServeArgs {
    #[arg(long)]
    session: Option<PathBuf>,
    /// [default: 8787]
    #[arg(long)]
    port: Option<u16>,
    /// [default: 127.0.0.1]
    #[arg(long)]
    host: Option<IpAddr>,
}

/// Overlays flags given on the command line onto the config file section.
/// Absent options, unset switches and empty lists count as not given.
fn merge<T: Serialize + DeserializeOwned>(cli: T, section: Option<&Value>) -> Result<T> {
    let Some(section) = section else {
        return Ok(cli);
    };
    let Value::Object(mut base) = section.clone() else {
        return Err(Error::Usage("config file sections must be JSON objects".into()));
    };
    if let Value::Object(given) = serde_json::to_value(&cli)? {
        for (k, v) in given {
            let unset = match &v {
                Value::Null | Value::Bool(false) => true,
                Value::Array(a) => a.is_empty(),
                _ => false,
            };
            if !unset {
                base.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(base)).map_err(|e| Error::Usage(format!("config file: {e}")))
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| Error::Usage(format!("--{flag} is required")))
}

fn parse_stretch(s: &str) -> Result<StretchSpec> {
    s.parse().map_err(|e: Error| Error::Usage(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file: Option<Value> = match &cli.config {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::Usage(format!("{}: {e}", p.display())))?;
            Some(serde_json::from_slice(&bytes).map_err(|e| Error::Usage(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let section = |name: &str| file.as_ref().and_then(|f| f.get(name));
    match cli.command {
        Command::Ingest(a) => ingest(merge(a, section("ingest"))?),
        Command::Init(a) => init(merge(a, section("init"))?),
        Command::Train(a) => train(merge(a, section("train"))?),
        Command::Bench(a) => bench(merge(a, section("bench"))?),
        Command::Score(a) => score(merge(a, section("score"))?),
        Command::Eval(a) => eval(merge(a, section("eval"))?),
        Command::Serve(a) => serve(merge(a, section("serve"))?),
    }
}

fn ingest(a: IngestArgs) -> Result<()> {
    let catalog = DatasetCatalog::load_jsonl(&required(a.catalog, "catalog")?)?;
    let out = required(a.out, "out")?;
    let size = a.size.unwrap_or(64);
    let stretch = parse_stretch(a.stretch.as_deref().unwrap_or("linear"))?;
    let channels = catalog.records().first().map_or(3, |r| r.channels as usize);
    let shape = ShardShape::new(channels, size, size)?;
    let index = build_shard_cache(&catalog, &stretch, a.shard_size.unwrap_or(1024), shape, &out)?;
    eprintln!("wrote {} images to {}", index.len(), out.display());
    Ok(())
}

fn init(a: InitArgs) -> Result<()> {
    let dir = required(a.session, "session")?;
    let mut config: SessionConfig = match &a.session_config {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
        None => SessionConfig::default(),
    };
    if let Some(s) = a.seed {
        config.train.seed = s;
    }
    if let Some(n) = a.iters {
        config.train.iterations = n;
    }
    let (catalog, labels, source): (DatasetCatalog, LabelStore, Arc<dyn ImageSource>) = match &a.synthetic {
        Some(name) => {
            if a.catalog.is_some() || a.cache.is_some() || a.labels.is_some() {
                return Err(Error::Usage("--synthetic conflicts with --catalog, --cache and --labels".into()));
            }
            let protocol: Protocol = name.parse()?;
            let synth = rarematch::synth::SynthConfig {
                size: a.size.unwrap_or(64),
                ..protocol.synth_config(config.train.seed)
            };
            let set = generate(&synth)?;
            let cache_dir = dir.join("cache");
            let shape = ShardShape::new(synth.channels, synth.size, synth.size)?;
            let images: Vec<(&str, &[u8])> = set
                .catalog
                .records()
                .iter()
                .map(|r| (r.id.as_str(), set.source.bytes(&r.id).expect("generated image")))
                .collect();
            write_cache(&cache_dir, shape, 1024, images)?;
            config.backbone = backbone::BackboneSpec::with_input(synth.channels, synth.size, synth.size);
            config.cache = Some(PathBuf::from("cache"));
            let source: Arc<dyn ImageSource> = Arc::new(ShardCache::open_strict(&cache_dir)?);
            (set.catalog, set.seed_labels, source)
        }
        None => {
            let catalog = DatasetCatalog::load_jsonl(&required(a.catalog, "catalog")?)?;
            let cache_path = std::path::absolute(required(a.cache, "cache")?)?;
            let cache = ShardCache::open_strict(&cache_path)?;
            let (c, h, w) = cache.shape().as_tuple();
            config.backbone = backbone::BackboneSpec::with_input(c, h, w);
            config.cache = Some(cache_path);
            let labels = match &a.labels {
                Some(p) => LabelStore::load_csv(p)?,
                None => seed_labels_from_catalog(&catalog)?,
            };
            let mut catalog = catalog;
            let active: Vec<String> = labels.active().keys().map(|id| id.to_string()).collect();
            let labelled: Vec<&str> = active
                .iter()
                .map(String::as_str)
                .filter(|id| catalog.split_of(id) == Some(Split::Unlabelled))
                .collect();
            catalog.move_to_labelled(labelled)?;
            (catalog, labels, Arc::new(cache))
        }
    };
    let session = ActiveSession::new(config, catalog, labels, source)?;
    session.save(&dir)?;
    let (normal, anomaly) = session.labels.class_counts();
    eprintln!(
        "session {} created: {} images, {anomaly} anomaly and {normal} normal labels",
        dir.display(),
        session.catalog.len()
    );
    Ok(())
}

fn seed_labels_from_catalog(catalog: &DatasetCatalog) -> Result<LabelStore> {
    let mut labels = LabelStore::new();
    for id in catalog.labelled() {
        let label = catalog
            .gt_label(id)
            .ok_or_else(|| Error::Usage(format!("'{id}' is labelled in the catalog but has no gt_label; pass --labels")))?;
        labels.append(id.clone(), label, Provenance::Seed);
    }
    Ok(labels)
}

fn print_cycle(prefix: &str, c: &CycleReport) {
    match &c.metrics {
        Some(m) => eprintln!(
            "{prefix}cycle {} labelled {} mask {:.3} auroc {:.4} auprc {:.4} eff@1% {:.1}",
            c.cycle, c.labelled, c.mean_mask_rate, m.auroc, m.auprc, m.efficiency_at_1
        ),
        None => eprintln!("{prefix}cycle {} labelled {} mask {:.3}", c.cycle, c.labelled, c.mean_mask_rate),
    }
}

fn prompt_labels(session: &ActiveSession) -> Result<Vec<(String, Label)>> {
    let table = session.scores.clone().unwrap_or_default();
    let candidates = select_candidates(&table, session.config.candidates_per_class, SelectionMode::Interactive);
    let scores: std::collections::HashMap<&str, f64> = table.rows().iter().map(|r| (r.id.as_str(), r.score)).collect();
    let stdin = std::io::stdin();
    let mut lines = stdin.lock().lines();
    let mut out = Vec::new();
    eprintln!("label candidates: a = anomaly, n = normal, enter = skip, q = stop");
    for id in &candidates.review {
        eprint!("{id} (score {:.4}) > ", scores.get(id.as_str()).copied().unwrap_or(f64::NAN));
        std::io::stderr().flush()?;
        let Some(line) = lines.next() else { break };
        match line?.trim() {
            "a" => out.push((id.clone(), Label::Anomaly)),
            "n" => out.push((id.clone(), Label::Normal)),
            "q" => break,
            _ => {}
        }
    }
    Ok(out)
}

fn train(a: TrainArgs) -> Result<()> {
    let dir = required(a.session, "session")?;
    let mut session = ActiveSession::load(&dir)?;
    if let Some(n) = a.iters {
        session.config.train.iterations = n;
        session.config.validate()?;
    }
    let progress = |done: usize, total: usize| {
        if done % 10 == 0 || done == total {
            eprintln!("  step {done}/{total}");
        }
    };
    for _ in 0..a.cycles.unwrap_or(3) {
        let (log, report) = session.run_cycle(Some(&progress))?;
        log.write_csv(&dir.join(format!("train_log_cycle_{}.csv", report.cycle)))?;
        print_cycle("", &report);
        let new = if a.oracle {
            let table = session.scores.clone().unwrap_or_default();
            let candidates =
                select_candidates(&table, session.config.candidates_per_class, SelectionMode::Oracle);
            if candidates.shortfall {
                log::warn!("fewer candidates than requested in cycle {}", session.cycle);
            }
            session.oracle_labels(&candidates)?
        } else {
            prompt_labels(&session)?
        };
        let commit = session.commit_labels(&new)?;
        eprintln!("committed {} labels", commit.applied);
        session.save(&dir)?;
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let protocol: Protocol = a.protocol.as_deref().unwrap_or("miniimagenet-like").parse()?;
    let mut config = BenchConfig {
        protocol,
        seeds: seeds_for(a.seeds.unwrap_or(9)),
        cycles: a.cycles.unwrap_or(3),
        initial_labels: a.initial_labels,
        size: a.size.unwrap_or(64),
        ..BenchConfig::default()
    };
    if let Some(n) = a.iters {
        config.session.train.iterations = n;
    }
    if let Some(k) = a.per_cycle {
        config.session.candidates_per_class = k;
    }
    let data = match (&a.catalog, &a.cache) {
        (Some(catalog), Some(cache)) => {
            let cache = ShardCache::open_strict(cache)?;
            let shape = cache.shape().as_tuple();
            BenchData::Catalog {
                catalog: DatasetCatalog::load_jsonl(catalog)?,
                source: Arc::new(cache),
                shape,
            }
        }
        (None, None) => BenchData::Synthetic,
        _ => return Err(Error::Usage("--catalog and --cache must be given together".into())),
    };
    let report = run_bench(&config, &data, |seed, c| print_cycle(&format!("seed {seed} "), c))?;
    write_or_print(a.out.as_deref(), &report.table_csv())?;
    if let Some(p) = &a.cycles_out {
        std::fs::write(p, report.cycles_csv())?;
    }
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let state = backbone::load_checkpoint(&required(a.checkpoint, "checkpoint")?)?.state;
    let shards = required(a.shards, "shards")?;
    let cache = if a.skip_invalid { ShardCache::open(&shards)? } else { ShardCache::open_strict(&shards)? };
    let opts = ScoreOptions {
        batch: a.batch.unwrap_or(64),
        top_k: a.topk.unwrap_or(1000),
        workers: a.workers.unwrap_or(1),
        skip_invalid: a.skip_invalid,
    };
    let out = a.out.unwrap_or_else(|| PathBuf::from("scores.csv"));
    let mut csv = std::io::BufWriter::new(std::fs::File::create(&out)?);
    let summary = score_stream(&state, &cache, &opts, &mut csv, &mut stderr_progress)?;
    csv.flush()?;
    summary.top.write_csv(&a.topk_out.unwrap_or_else(|| PathBuf::from("topk.csv")))?;
    eprintln!("scored {} images, {} shards skipped", summary.scored, summary.skipped.len());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let catalog = DatasetCatalog::load_jsonl(&required(a.gt, "gt")?)?;
    let table = ScoreTable::read_csv(&required(a.scores, "scores")?)?.with_ground_truth(&catalog);
    let mut report = MetricsReport::from_table(&table)?;
    if !a.at.is_empty() {
        let mut points = default_curve_points();
        points.extend(&a.at);
        points.sort_by(f64::total_cmp);
        points.dedup();
        report.efficiency = efficiency_curve(&table, &points)?;
    }
    let json = serde_json::to_string_pretty(&report)? + "\n";
    write_or_print(a.out.as_deref(), &json)
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let dir = required(a.session, "session")?;
    let session = ActiveSession::load(&dir)?;
    let addr = SocketAddr::new(
        a.host.unwrap_or(IpAddr::from([127, 0, 0, 1])),
        a.port.unwrap_or(8787),
    );
    let state = server::AppState::new(session, dir);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(server::serve(state, addr))?;
    Ok(())
}

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cmstore::gateway::{Clock, Gateway, LogicalClock, SystemClock};
use cmstore::harness::{
    run_session, score_session, timeslice_eval, RulePolicy, SessionSpec, TimesliceConfig,
};
use cmstore::inference::{Exclusion, NoteClass, Task};
use cmstore::io::{import_dir, load_store, save_store, write_inputs};
use cmstore::model::{build_store, BuildConfig, NoteId, VectorStore};
use cmstore::retrieval::{retrieve, Limit, Query};
use cmstore::synth::{generate_plant, PlantConfig};

#[derive(Parser)]
#[command(
    name = "cmstore",
    version,
    about = "Condition-monitoring retrieval store"
)]
struct Cli {
    /// Print machine-readable JSON instead of tables.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StoreArg {
    /// Saved store directory.
    #[arg(long, env = "CMSTORE_STORE")]
    store: PathBuf,
}

// Spelled as in the JSON configs; the kebab-case forms are accepted too.
#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum TaskArg {
    Note,
    Component,
    #[value(alias = "component-group")]
    ComponentGroup,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ExclusionArg {
    None,
    #[value(alias = "same-point")]
    SamePoint,
    #[value(alias = "same-asset")]
    SameAsset,
}

impl From<ExclusionArg> for Exclusion {
    fn from(e: ExclusionArg) -> Self {
        match e {
            ExclusionArg::None => Exclusion::None,
            ExclusionArg::SamePoint => Exclusion::SamePoint,
            ExclusionArg::SameAsset => Exclusion::SameAsset,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic plant as import files.
    Synth {
        /// Plant config (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Import files and build a store.
    Build {
        /// Directory with assets.jsonl, notes.jsonl and recordings.jsonl.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Build config (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run one query against a store.
    Query {
        #[command(flatten)]
        store: StoreArg,
        /// Query (JSON).
        #[arg(long)]
        query_file: PathBuf,
        /// Overrides the query's limit.
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Per-day prediction accuracy around annotations.
    EvalTimeslice {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long, value_enum, default_value = "note")]
        task: TaskArg,
        #[arg(long, value_enum, default_value = "none")]
        exclusion: ExclusionArg,
        #[arg(long)]
        top_k: Option<usize>,
        /// Timeslice config (JSON); flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
        /// Directory for report.json and confusion.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Streaming sessions with the built-in rule policy.
    EvalStream {
        #[command(flatten)]
        store: StoreArg,
        /// Anchor notes; every note when absent.
        #[arg(long = "note")]
        notes: Vec<u64>,
        #[arg(long, default_value_t = -50, allow_negative_numbers = true)]
        from_day: i64,
        #[arg(long, default_value_t = 20, allow_negative_numbers = true)]
        to_day: i64,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        #[arg(long, value_enum, default_value = "same_asset")]
        exclusion: ExclusionArg,
        /// Directory for per-session trace files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the tool gateway over stdio, or TCP with --tcp.
    Serve {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long)]
        tcp: Option<String>,
        /// Use a logical clock starting at this RFC 3339 time.
        #[arg(long)]
        logical_clock: Option<String>,
        /// Session idle timeout in seconds.
        #[arg(long, default_value_t = cmstore::gateway::DEFAULT_SESSION_TTL_SECS)]
        ttl: i64,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn open_store(arg: &StoreArg) -> Result<VectorStore> {
    load_store(&arg.store).with_context(|| format!("loading store {}", arg.store.display()))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

fn excerpt(s: &str, n: usize) -> String {
    let mut out: String = s.chars().take(n).collect();
    if s.chars().count() > n {
        out.push('…');
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, seed } => {
            let mut plant: PlantConfig = read_json(&config)?;
            if let Some(s) = seed {
                plant.seed = s;
            }
            let inputs = generate_plant(&plant)?;
            let paths = write_inputs(&inputs, &out)?;
            if cli.json {
                print_json(&serde_json::json!({
                    "assets": inputs.assets.len(),
                    "points": inputs.points.len(),
                    "annotations": inputs.annotations.len(),
                    "recordings": inputs.recordings.len(),
                    "files": paths,
                }))?;
            } else {
                println!(
                    "{} assets, {} points, {} notes, {} recordings -> {}",
                    inputs.assets.len(),
                    inputs.points.len(),
                    inputs.annotations.len(),
                    inputs.recordings.len(),
                    out.display()
                );
            }
        }
        Command::Build { input, out, config } => {
            let config: BuildConfig = match config {
                Some(p) => read_json(&p)?,
                None => BuildConfig::default(),
            };
            let inputs = import_dir(&input)?;
            let store = build_store(inputs, &config)?;
            let manifest = save_store(&store, &out)?;
            if cli.json {
                print_json(&manifest)?;
            } else {
                let c = manifest.counts;
                println!("store      {}", out.display());
                println!("assets     {}", c.assets);
                println!("points     {}", c.points);
                println!("notes      {}", c.annotations);
                println!("recordings {}", c.recordings);
                println!("documents  {}", c.documents);
                println!("chunks     {}", c.chunks);
                println!("digest     {}", manifest.digest);
            }
        }
        Command::Query {
            store,
            query_file,
            top_k,
        } => {
            let store = open_store(&store)?;
            let mut query: Query = read_json(&query_file)?;
            if let Some(k) = top_k {
                query.limit = Limit::TopK(k);
            }
            let hits = retrieve(&store, &query)?;
            if cli.json {
                print_json(&hits)?;
            } else {
                println!(
                    "{:>4}  {:>9}  {:<24}  {:<22}  note",
                    "rank", "total", "id", "point"
                );
                for (i, h) in hits.iter().enumerate() {
                    let id = match h.id.chunk() {
                        Some(c) => c.to_string(),
                        None => h.id.doc().to_string(),
                    };
                    println!(
                        "{:>4}  {:>9.5}  {:<24}  {:<22}  {}",
                        i + 1,
                        h.total,
                        id,
                        h.provenance.point_name,
                        excerpt(&h.provenance.note_content, 50)
                    );
                }
            }
        }
        Command::EvalTimeslice {
            store,
            task,
            exclusion,
            top_k,
            config,
            threads,
            out,
        } => {
            let store = open_store(&store)?;
            let mut cfg: TimesliceConfig = match config {
                Some(p) => read_json(&p)?,
                None => TimesliceConfig::default(),
            };
            cfg.predict.task = match task {
                TaskArg::Note => Task::Note,
                TaskArg::Component => Task::Component,
                TaskArg::ComponentGroup => Task::ComponentGroup,
            };
            cfg.predict.exclusion = exclusion.into();
            if let Some(k) = top_k {
                cfg.predict.top_k = k;
            }
            if let Some(t) = threads {
                cfg.threads = t;
            }
            let report = timeslice_eval(&store, &cfg)?;
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
                if let Some(m) = &report.overall {
                    fs::write(dir.join("confusion.csv"), m.to_csv())?;
                }
            }
            if cli.json {
                print_json(&report)?;
            } else {
                println!(
                    "{:>5}  {:>7}  {:>8}  {:>8}  {:>8}",
                    "day", "support", "acc", "bal_acc", "f1"
                );
                for d in report.days.iter().filter(|d| d.support > 0) {
                    println!(
                        "{:>5}  {:>7}  {:>8}  {:>8}  {:>8}",
                        d.day,
                        d.support,
                        fmt_opt(d.accuracy),
                        fmt_opt(d.balanced_accuracy),
                        fmt_opt(d.macro_f1)
                    );
                }
                if let Some(m) = &report.overall {
                    println!(
                        "overall accuracy {} balanced {} macro-F1 {}",
                        fmt_opt(m.accuracy()),
                        fmt_opt(m.balanced_accuracy()),
                        fmt_opt(m.macro_f1())
                    );
                }
            }
        }
        Command::EvalStream {
            store,
            notes,
            from_day,
            to_day,
            top_k,
            exclusion,
            out,
        } => {
            let store = open_store(&store)?;
            let ids: Vec<NoteId> = if notes.is_empty() {
                store.annotations().iter().map(|n| n.id).collect()
            } else {
                notes.into_iter().map(NoteId).collect()
            };
            if let Some(dir) = &out {
                fs::create_dir_all(dir)?;
            }
            let mut records = Vec::new();
            for id in ids {
                let mut spec = SessionSpec::new(id, from_day, to_day);
                spec.top_k = top_k;
                spec.exclusion = exclusion.into();
                let mut policy = RulePolicy::default();
                let trace = run_session(&store, spec, &mut policy)?;
                if let Some(dir) = &out {
                    fs::write(
                        dir.join(format!("session-{}.jsonl", id.0)),
                        trace.steps_jsonl()?,
                    )?;
                }
                if let Some(reason) = &trace.aborted {
                    bail!("session on note {id} aborted: {reason}");
                }
                records.push(score_session(&store, &trace, &policy.ontology)?);
            }
            if cli.json {
                print_json(&records)?;
            } else {
                println!(
                    "{:>6}  {:<20}  {:<20}  {:>6}  score",
                    "note", "truth", "prediction", "exit"
                );
                for r in &records {
                    println!(
                        "{:>6}  {:<20}  {:<20}  {:>6}  {:?}",
                        r.note_id.to_string(),
                        r.true_class.name(),
                        r.prediction.map_or("no_fault", NoteClass::name),
                        r.timedelta_at_exit,
                        r.score
                    );
                }
            }
        }
        Command::Serve {
            store,
            tcp,
            logical_clock,
            ttl,
        } => {
            let store = open_store(&store)?;
            let clock: Arc<dyn Clock> = match logical_clock {
                Some(t) => {
                    let start = chrono::DateTime::parse_from_rfc3339(&t)
                        .with_context(|| format!("parsing --logical-clock {t:?}"))?
                        .with_timezone(&chrono::Utc);
                    Arc::new(LogicalClock::new(start))
                }
                None => Arc::new(SystemClock),
            };
            let gw = Arc::new(
                Gateway::new(Arc::new(store), clock).with_ttl(chrono::Duration::seconds(ttl)),
            );
            match tcp {
                Some(addr) => {
                    let listener = std::net::TcpListener::bind(&addr)
                        .with_context(|| format!("binding {addr}"))?;
                    eprintln!("listening on {}", listener.local_addr()?);
                    gw.serve_listener(listener)?
                }
                None => {
                    let stdin = io::stdin();
                    gw.serve(stdin.lock(), io::stdout().lock())?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

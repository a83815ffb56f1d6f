use std::collections::BTreeMap;
use std::fs;
use std::io::Read as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use opsdesk_core::bench::{self, BenchMode};
use opsdesk_core::config::Config;
use opsdesk_core::kb::ingest::ingest_dir;
use opsdesk_core::kb::{KnowledgeStore, Level};
use opsdesk_core::llm::replay::{fingerprint, Script, ScriptedProvider};
use opsdesk_core::llm::{ChatProvider, Message, RequestContext};
use opsdesk_core::par::ExecPolicy;
use opsdesk_core::runtime::{build_embedder, build_provider, Runtime};
use opsdesk_core::sop_extract::{Mutation, SopExtractor};
use opsdesk_core::tickets::{normalize_action, read_jsonl, CauseModel, LabeledTicket, Ticket, TicketLabels};
use opsdesk_server::AppState;

#[derive(Parser)]
#[command(name = "opsdesk", version, about = "Operations support assistant")]
struct Cli {
    /// TOML configuration; OPSDESK_* environment variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

/// Where the knowledge and the model come from.
#[derive(clap::Args, Clone)]
struct Source {
    /// Load a read-only fixture world instead of the data directory.
    #[arg(long)]
    world: Option<PathBuf>,
    /// Answer chat calls from a rule script instead of the configured provider.
    #[arg(long)]
    script: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum IngestLevel {
    Sop,
    Internal,
}

#[derive(Subcommand)]
enum Command {
    /// Load a directory of documents into a knowledge store.
    Ingest {
        #[arg(long, value_enum)]
        level: IngestLevel,
        /// Internal knowledge base name.
        #[arg(long, required_if_eq("level", "internal"))]
        base: Option<String>,
        dir: PathBuf,
    },
    /// Extract SOPs from solved tickets (JSON lines) and merge them into the SOP store.
    Extract {
        tickets: PathBuf,
        #[command(flatten)]
        source: Source,
    },
    /// Run labeled cases through one answering strategy; writes a JSON-lines report.
    Bench {
        #[arg(long)]
        cases: PathBuf,
        /// cot, rag, vanilla_deepsearch or full
        #[arg(long, default_value = "full")]
        mode: BenchMode,
        /// Synthetic latency added to every chat call.
        #[arg(long, default_value_t = 0)]
        delay_ms: u64,
        #[arg(long)]
        sequential: bool,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        source: Source,
    },
    /// Fit the cause model from labeled tickets (JSON lines).
    FitCauseModel {
        examples: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attribute a cause from final actions.
    Assign {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(required = true)]
        actions: Vec<String>,
    },
    /// Transcript fingerprint of a JSON message list (file or stdin).
    Fingerprint {
        #[arg(long)]
        tag: String,
        messages: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        listen: Option<String>,
        #[command(flatten)]
        source: Source,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let config = Config::load(cli.config.as_deref()).context("loading configuration")?;
    match cli.command {
        Command::Ingest { level, base, dir } => ingest(&config, level, base, &dir),
        Command::Extract { tickets, source } => extract(config, &source, &tickets),
        Command::Bench { cases, mode, delay_ms, sequential, out, source } => {
            let exec = if sequential { ExecPolicy::Sequential } else { ExecPolicy::Parallel };
            run_bench(config, &source, &cases, mode, Duration::from_millis(delay_ms), exec, out.as_deref())
        }
        Command::FitCauseModel { examples, out } => fit(&config, &examples, &out),
        Command::Assign { model, threshold, actions } => assign(&config, &model, threshold, &actions),
        Command::Fingerprint { tag, messages } => print_fingerprint(&tag, messages.as_deref()),
        Command::Serve { listen, source } => serve(config, &source, listen),
    }
}

fn runtime(config: Config, source: &Source, delay: Option<Duration>) -> Result<Runtime> {
    let scripted = match &source.script {
        Some(p) => {
            let script = Script::load(p).with_context(|| format!("loading {}", p.display()))?;
            Some(Arc::new(ScriptedProvider::new(p.display().to_string(), script)?) as Arc<dyn ChatProvider>)
        }
        None => None,
    };
    Ok(match &source.world {
        Some(world) => {
            let provider = match scripted {
                Some(p) => p,
                None => build_provider("default", &config.llm.default_spec(), config.llm.timeout_secs)?,
            };
            Runtime::from_world_with(world, provider, config, delay)?
        }
        None => Runtime::open_with(config, scripted, delay)?,
    })
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn ingest(config: &Config, level: IngestLevel, base: Option<String>, dir: &Path) -> Result<()> {
    let kb = config.paths.data_dir.join("kb");
    let (path, level, base) = match level {
        IngestLevel::Sop => (kb.join("sop"), Level::Sop, "sop".to_string()),
        IngestLevel::Internal => {
            let base = base.context("--base is required for internal documents")?;
            (kb.join("internal").join(&base), Level::Internal, base)
        }
    };
    let store = KnowledgeStore::open(&path, level, base, build_embedder(&config.llm)?)?;
    let report = ingest_dir(&store, dir)?;
    print_json(&serde_json::json!({
        "store": path,
        "added": report.added,
        "total": store.len(),
        "failures": report.failures.iter().map(|f| serde_json::json!({ "file": f.file, "reason": f.reason })).collect::<Vec<_>>(),
    }))
}

/// A ticket line; labels from categorization are optional.
#[derive(serde::Deserialize)]
struct TicketLine {
    #[serde(flatten)]
    ticket: Ticket,
    #[serde(default)]
    labels: Option<TicketLabels>,
}

fn extract(config: Config, source: &Source, tickets: &Path) -> Result<()> {
    let lines: Vec<TicketLine> = read_jsonl(tickets)?;
    let rt = runtime(config, source, None)?;
    let extractor = SopExtractor::new(&rt.gateway, rt.extraction_params());
    let (mut added, mut replaced, mut failed) = (0usize, 0usize, 0usize);
    let mut unchanged: BTreeMap<String, usize> = BTreeMap::new();
    for line in &lines {
        let mut ctx = RequestContext::new(rt.config.budget.budget());
        match extractor.extract_and_integrate(&line.ticket, line.labels.as_ref(), rt.hierarchy.sop_store(), &rt.queue, &mut ctx) {
            Ok(report) => {
                match &report.mutation {
                    Mutation::Added { .. } => added += 1,
                    Mutation::Replaced { .. } => replaced += 1,
                    Mutation::None { reason } => *unchanged.entry(reason.clone()).or_default() += 1,
                }
                eprintln!("{}", serde_json::to_string(&serde_json::json!({ "ticket": report.ticket_id, "mutation": report.mutation }))?);
            }
            Err(e) => {
                failed += 1;
                eprintln!("{}: {e}", line.ticket.id);
            }
        }
    }
    print_json(&serde_json::json!({
        "tickets": lines.len(),
        "added": added,
        "replaced": replaced,
        "unchanged": unchanged,
        "failed": failed,
        "sop_count": rt.hierarchy.sop_store().len(),
    }))
}

fn run_bench(
    config: Config,
    source: &Source,
    cases: &Path,
    mode: BenchMode,
    delay: Duration,
    exec: ExecPolicy,
    out: Option<&Path>,
) -> Result<()> {
    let cases = bench::load_cases(cases)?;
    let rt = runtime(config, source, Some(delay))?;
    let report = bench::run_bench(&rt.pipeline, &cases, mode, exec);
    let jsonl = report.to_jsonl();
    match out {
        Some(p) => fs::write(p, &jsonl).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{jsonl}"),
    }
    eprintln!(
        "{mode}: accuracy {:.3} ({}/{} scored, {} errored), mean latency {:.1} ms, p90 {:.1} ms, mean iterations {:.2}",
        report.accuracy, report.matches, report.scored, report.errored, report.mean_latency_ms, report.p90_latency_ms, report.mean_iterations
    );
    Ok(())
}

fn fit(config: &Config, examples: &Path, out: &Path) -> Result<()> {
    let examples: Vec<LabeledTicket> = read_jsonl(examples)?;
    let c = &config.causes;
    let model = CauseModel::fit(&examples, &c.causes, &c.vocabulary, c.alpha, c.priors.as_ref())?;
    fs::write(out, model.to_json()).with_context(|| format!("writing {}", out.display()))?;
    print!("{}", model.to_table());
    Ok(())
}

fn assign(config: &Config, model: &Path, threshold: Option<f64>, actions: &[String]) -> Result<()> {
    let text = fs::read_to_string(model).with_context(|| format!("reading {}", model.display()))?;
    let model = CauseModel::from_json(&text)?;
    let threshold = threshold.unwrap_or(config.thresholds.assign);
    if !(0.0..=1.0).contains(&threshold) {
        bail!("threshold must be within [0, 1]");
    }
    let labels = TicketLabels::with_actions(actions.iter().map(|a| normalize_action(a)).collect());
    print_json(&model.assign(&labels, threshold))
}

fn print_fingerprint(tag: &str, path: Option<&Path>) -> Result<()> {
    let text = match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s)?;
            s
        }
    };
    let messages: Vec<Message> = serde_json::from_str(&text).context("expected a JSON array of {role, content}")?;
    println!("{}", fingerprint(tag, &messages));
    Ok(())
}

fn serve(mut config: Config, source: &Source, listen: Option<String>) -> Result<()> {
    if let Some(l) = listen {
        config.server.listen = l;
    }
    let addr = config.server.listen.clone();
    let rt = runtime(config, source, None)?;
    let state = AppState::new(rt);
    tokio::runtime::Builder::new_multi_thread().enable_all().build()?.block_on(opsdesk_server::serve(state, &addr))?;
    Ok(())
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cramf_core::config::{self, Config, ConfigError, Effective, Sources};
use cramf_core::eval::{load_problems, render_table, run_eval, EvalAdapters};
use cramf_core::index::{build_index, encode_units, IndexSide, VectorIndex};
use cramf_core::ingest;
use cramf_core::kb::{self, validate, KnowledgeBase};
use cramf_core::populate::{populate, PopulateError};
use cramf_core::provider::replay::Tape;
use cramf_core::provider::{Gateway, TraceLog};
use cramf_core::retrieval::{baseline_bm25, Retriever};
use cramf_core::util::write_atomic;

#[derive(Parser, Debug)]
#[command(name = "cramf", version)]
#[command(about = "Concept-driven definition retrieval for autoformalization")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override `key=value`, highest precedence; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Write every provider call and pipeline event to this file.
    #[arg(long, global = true)]
    trace: Option<PathBuf>,
    /// Answer every provider call from a recorded tape.
    #[arg(long, global = true, conflicts_with = "record")]
    replay: Option<PathBuf>,
    /// Record every provider call to a tape.
    #[arg(long, global = true)]
    record: Option<PathBuf>,
    /// Worker threads; same as `--set workers=N`.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a knowledge base from a documentation export.
    Ingest {
        #[arg(long)]
        export: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Fill in descriptions and concepts.
    Populate {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint of an interrupted run.
        #[arg(long)]
        resume: bool,
        /// Defaults to `<out>.checkpoint.jsonl`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `<out>.skips.json`.
        #[arg(long)]
        skip_report: Option<PathBuf>,
    },
    /// Embed knowledge units and write a vector index.
    Index {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long, default_value = "concept")]
        side: IndexSide,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve grounding definitions for one statement.
    Retrieve {
        #[arg(long)]
        kb: PathBuf,
        /// Concept-side index; not needed with `--baseline`.
        #[arg(long)]
        index: Option<PathBuf>,
        /// Statement text, or a file holding it.
        #[arg(long)]
        statement: String,
        #[arg(long, value_parser = ["bm25"])]
        baseline: Option<String>,
        /// Write the rendered grounding prompt here.
        #[arg(long)]
        emit_prompt: Option<PathBuf>,
        /// Write the full retrieval result as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run the formalization evaluation over a problems file.
    Eval {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        problems: PathBuf,
        /// Attempts per problem.
        #[arg(long)]
        k: Option<usize>,
        /// Also run without retrieval and report relative gains.
        #[arg(long)]
        control: bool,
        /// Write metrics and per-problem records as JSON here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Check knowledge-base invariants.
    Validate {
        #[arg(long)]
        kb: PathBuf,
    },
    /// Inspect configuration.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand, Debug)]
enum ConfigAction {
    /// Print every key with its value and the layer that set it.
    Show {
        /// Merge file, environment and flags (the only mode).
        #[arg(long)]
        effective: bool,
    },
}

/// Usage and configuration problems exit 2; everything else exits 1.
enum Failure {
    Usage(anyhow::Error),
    Operational(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Operational(e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

struct Runtime {
    config: Config,
    effective: Effective,
    gateway: Gateway,
    trace: Option<(PathBuf, Arc<TraceLog>)>,
    record: Option<(PathBuf, Arc<Tape>)>,
    cancel: Arc<AtomicBool>,
}

impl Runtime {
    fn new(global: &Global) -> Result<Runtime, Failure> {
        let mut overrides = global.overrides.clone();
        if let Some(w) = global.workers {
            overrides.push(format!("workers={w}"));
        }
        let effective = config::load(
            &Sources {
                file: global.config.as_deref(),
                overrides,
                ..Sources::default()
            }
            .process_env(),
        )?;
        let config = effective.config.clone();
        let replay = match &global.replay {
            Some(p) => Some(Arc::new(
                Tape::load(p).map_err(|e| Failure::Usage(anyhow!("replay tape: {e}")))?,
            )),
            None => None,
        };
        let mut gateway = config.gateway(replay)?;
        let trace = global.trace.as_ref().map(|p| (p.clone(), Arc::new(TraceLog::new())));
        if let Some((_, t)) = &trace {
            gateway = gateway.with_trace(t.clone());
        }
        let record = global.record.as_ref().map(|p| (p.clone(), Arc::new(Tape::new())));
        if let Some((_, t)) = &record {
            gateway = gateway.with_tape(t.clone());
        }
        // Fails only when a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build_global();
        let cancel = Arc::new(AtomicBool::new(false));
        let flag = cancel.clone();
        let _ = ctrlc::set_handler(move || {
            if flag.swap(true, Ordering::SeqCst) {
                std::process::exit(130);
            }
            eprintln!("interrupt: finishing the current batch; press again to abort");
        });
        Ok(Runtime {
            config,
            effective,
            gateway,
            trace,
            record,
            cancel,
        })
    }

    fn finish(&self) -> anyhow::Result<()> {
        if let Some((path, log)) = &self.trace {
            log.write(path)
                .with_context(|| format!("writing trace {}", path.display()))?;
        }
        if let Some((path, tape)) = &self.record {
            tape.save(path)
                .with_context(|| format!("writing tape {}", path.display()))?;
        }
        Ok(())
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn load_kb(path: &Path) -> anyhow::Result<KnowledgeBase> {
    kb::load(path).with_context(|| format!("loading knowledge base {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_ingest(export: &Path, out: &Path, report: Option<&Path>) -> Outcome {
    let (decls, ingest_report) = ingest::parse_export(export).map_err(anyhow::Error::from)?;
    let kept = ingest::filter_definitional(&decls);
    let entities = ingest::to_kb_entities(&kept);
    let kb = ingest::build_knowledge_base(&entities, &ingest_report.source_fingerprint)
        .map_err(anyhow::Error::from)?;
    kb::save(&kb, out).map_err(anyhow::Error::from)?;
    print!("{}", ingest_report.render_table());
    for d in &entities.duplicates {
        eprintln!(
            "warning: duplicate name {} in {}; kept the one from {}",
            d.name, d.dropped_module, d.kept_module
        );
    }
    println!(
        "{} definition(s), {} pending description(s) -> {}",
        kb.definitions.len(),
        kb.pending_count(),
        out.display()
    );
    if let Some(p) = report {
        write_json(
            p,
            &json!({
                "report": ingest_report,
                "duplicates": entities.duplicates,
                "discarded_annotations": entities.discarded_annotations,
            }),
        )?;
    }
    Ok(())
}

fn cmd_populate(
    rt: &Runtime,
    kb_path: &Path,
    out: &Path,
    resume: bool,
    checkpoint: Option<PathBuf>,
    skip_report: Option<PathBuf>,
) -> Outcome {
    let kb = load_kb(kb_path)?;
    let checkpoint = checkpoint.unwrap_or_else(|| with_suffix(out, ".checkpoint.jsonl"));
    let skip_path = skip_report.unwrap_or_else(|| with_suffix(out, ".skips.json"));
    let mut opts = rt.config.populate_options();
    opts.checkpoint = Some(checkpoint.clone());
    opts.resume = resume;
    opts.cancel = Some(rt.cancel.clone());
    match populate(&rt.gateway, &kb, &opts) {
        Ok(outcome) => {
            kb::save(&outcome.kb, out).map_err(anyhow::Error::from)?;
            write_json(&skip_path, &outcome.report)?;
            let _ = fs::remove_file(&checkpoint);
            let r = &outcome.report;
            println!(
                "populated {} of {} outstanding definition(s) ({} resumed, {} skipped); {} concept(s) -> {}",
                r.completed,
                r.outstanding,
                r.resumed,
                r.skipped.len(),
                outcome.kb.concepts.len(),
                out.display()
            );
            Ok(())
        }
        Err(PopulateError::BelowThreshold {
            completed,
            total,
            required,
            skipped,
        }) => {
            write_json(&skip_path, &json!({ "skipped": skipped }))?;
            Err(Failure::Operational(anyhow!(
                "only {completed} of {total} definition(s) populated, below the required ratio {required}; see {}",
                skip_path.display()
            )))
        }
        Err(e @ PopulateError::Interrupted { .. }) => Err(Failure::Operational(anyhow!(
            "{e}; rerun with --resume to continue from {}",
            checkpoint.display()
        ))),
        Err(e) => Err(Failure::Operational(e.into())),
    }
}

fn cmd_index(rt: &Runtime, kb_path: &Path, side: IndexSide, out: &Path) -> Outcome {
    let kb = load_kb(kb_path)?;
    let encoded = encode_units(&rt.gateway, &kb);
    for s in &encoded.skipped {
        eprintln!(
            "warning: skipped {} / {}: {}",
            s.concept_name, s.definition_identifier, s.error
        );
    }
    let index = build_index(encoded.units, side).map_err(anyhow::Error::from)?;
    index.save(out).map_err(anyhow::Error::from)?;
    println!(
        "indexed {} unit(s), {} dimension(s), model {} -> {}",
        index.len(),
        index.dim(),
        index.model_tag(),
        out.display()
    );
    Ok(())
}

fn statement_text(arg: &str) -> anyhow::Result<String> {
    let p = Path::new(arg);
    if p.is_file() {
        fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
    } else {
        Ok(arg.to_string())
    }
}

fn cmd_retrieve(
    rt: &Runtime,
    kb_path: &Path,
    index: Option<&Path>,
    statement: &str,
    baseline: Option<&str>,
    emit_prompt: Option<&Path>,
    json_out: Option<&Path>,
) -> Outcome {
    let text = statement_text(statement)?;
    if text.trim().is_empty() {
        return Err(usage("statement is empty"));
    }
    let kb = load_kb(kb_path)?;
    let (context, full) = match baseline {
        Some(_) => {
            let ctx = baseline_bm25(&rt.gateway, &text, &kb, rt.config.retrieval.final_top)
                .map_err(anyhow::Error::from)?;
            (ctx.clone(), serde_json::to_value(&ctx).map_err(anyhow::Error::from)?)
        }
        None => {
            let index_path = index.ok_or_else(|| usage("--index is required unless --baseline is given"))?;
            let index = VectorIndex::load(index_path).map_err(anyhow::Error::from)?;
            let r = Retriever::new(&rt.gateway, &kb, &index, rt.config.retrieval.clone())
                .retrieve(&text)
                .map_err(anyhow::Error::from)?;
            (r.context.clone(), serde_json::to_value(&r).map_err(anyhow::Error::from)?)
        }
    };
    for w in &context.warnings {
        eprintln!("warning: {w}");
    }
    if context.degraded {
        eprintln!("warning: degraded retrieval");
    }
    for (rank, e) in context.entries.iter().enumerate() {
        println!("{:>2}  {:.6}  {}", rank + 1, e.score, e.definition.identifier);
    }
    if context.entries.is_empty() {
        println!("no definitions retrieved");
    }
    if let Some(p) = emit_prompt {
        write_atomic(p, context.rendered_prompt.as_bytes())
            .with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = json_out {
        write_json(p, &full)?;
    }
    Ok(())
}

fn cmd_eval(
    rt: &Runtime,
    kb_path: &Path,
    index_path: &Path,
    problems: &Path,
    k: Option<usize>,
    control: bool,
    report: Option<&Path>,
) -> Outcome {
    let mut settings = rt.config.eval.clone();
    if let Some(k) = k {
        if k == 0 {
            return Err(usage("--k must be at least 1"));
        }
        settings.attempts = k;
    }
    let problems = load_problems(problems).map_err(anyhow::Error::from)?;
    let kb = load_kb(kb_path)?;
    let index = VectorIndex::load(index_path).map_err(anyhow::Error::from)?;
    let compiler = rt.config.compiler()?;
    let retriever = Retriever::new(&rt.gateway, &kb, &index, rt.config.retrieval.clone());
    let adapters = EvalAdapters {
        gateway: &rt.gateway,
        compiler: compiler.as_ref(),
    };
    let run = run_eval(&problems, &retriever, &adapters, &settings, control)
        .map_err(anyhow::Error::from)?;
    print!("{}", render_table(&run));
    if let Some(p) = report {
        write_json(p, &run)?;
    }
    Ok(())
}

fn cmd_validate(kb_path: &Path) -> Outcome {
    let text = fs::read_to_string(kb_path)
        .with_context(|| format!("reading {}", kb_path.display()))?;
    let kb = KnowledgeBase::parse_unchecked(&text).map_err(anyhow::Error::from)?;
    let report = validate(&kb);
    for v in &report.violations {
        println!("{v}");
    }
    println!("{} violations", report.violations.len());
    if report.is_valid() {
        Ok(())
    } else {
        Err(Failure::Operational(anyhow!(
            "{} violation(s) in {}",
            report.violations.len(),
            kb_path.display()
        )))
    }
}

fn dispatch(cli: Cli) -> Outcome {
    // Neither command talks to a provider, so they run without loading the
    // config; a trace records only the outcome.
    let local = match &cli.command {
        Command::Validate { kb } => Some(("validate", cmd_validate(kb))),
        Command::Ingest {
            export,
            out,
            report,
        } => Some(("ingest", cmd_ingest(export, out, report.as_deref()))),
        _ => None,
    };
    if let Some((name, result)) = local {
        if let Some(path) = &cli.global.trace {
            let log = TraceLog::new();
            log.push(json!({"event": name, "ok": result.is_ok()}));
            log.write(path)
                .with_context(|| format!("writing trace {}", path.display()))?;
        }
        return result;
    }
    let rt = Runtime::new(&cli.global)?;
    let result = match cli.command {
        Command::Populate {
            kb,
            out,
            resume,
            checkpoint,
            skip_report,
        } => cmd_populate(&rt, &kb, &out, resume, checkpoint, skip_report),
        Command::Index { kb, side, out } => cmd_index(&rt, &kb, side, &out),
        Command::Retrieve {
            kb,
            index,
            statement,
            baseline,
            emit_prompt,
            json,
        } => cmd_retrieve(
            &rt,
            &kb,
            index.as_deref(),
            &statement,
            baseline.as_deref(),
            emit_prompt.as_deref(),
            json.as_deref(),
        ),
        Command::Eval {
            kb,
            index,
            problems,
            k,
            control,
            report,
        } => cmd_eval(&rt, &kb, &index, &problems, k, control, report.as_deref()),
        Command::Config {
            action: ConfigAction::Show { .. },
        } => {
            print!("{}", rt.effective.render());
            Ok(())
        }
        Command::Validate { .. } | Command::Ingest { .. } => unreachable!("handled above"),
    };
    let finished = rt.finish().map_err(Failure::Operational);
    result.and(finished)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Operational(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use weathertgd::ablation::{comparison_csv, run_ablation, AblationRow};
use weathertgd::agents::AgentRole;
use weathertgd::backend::{BackendError, CompletionProvider, ProviderRegistry, RequestDefaults, ResponseCache};
use weathertgd::embed::EmbedderRegistry;
use weathertgd::eval::{
    evaluate_item, krippendorff_alpha, load_batch, results_jsonl, summarize_results, summary_csv, AnnotationTable,
    EvalError, Judge,
};
use weathertgd::optimizer::{derive_run_id, Engine, RunError};
use weathertgd::replay::{replay, ReplayError};
use weathertgd::series::{
    parse_series, render_stats_table, serialize_for_prompt, summarize, InputFormat, WeatherSeries,
};
use weathertgd::templates::TemplateSet;
use weathertgd::trace::{report, RunTrace, TraceWriter};
use weathertgd::{ConfigOverrides, RunConfig};

const EXIT_INPUT: u8 = 1;
const EXIT_BACKEND: u8 = 2;

#[derive(Parser)]
#[command(
    name = "weathertgd",
    version,
    about = "Multi-agent caption refinement for weather time series"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration file; built-in defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for run traces and reports
    #[arg(long, global = true)]
    trace_dir: Option<PathBuf>,
    /// Directory for the response cache
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Parallel samples for batch commands
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Agent that writes the initial caption
    #[arg(long, global = true)]
    seed_role: Option<AgentRole>,
    /// Record pairwise fragment similarities in traces
    #[arg(long, global = true)]
    trace_similarities: bool,
    /// Store full template text in trace headers
    #[arg(long, global = true)]
    embed_templates: bool,
    /// Use a scripted response file instead of the configured provider
    #[arg(long, global = true)]
    script: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Caption one or more series files
    Caption {
        #[arg(required = true)]
        series: Vec<PathBuf>,
        /// Linearly interpolate interior missing values
        #[arg(long)]
        allow_gaps: bool,
    },
    /// Score a JSONL batch of captions
    Evaluate {
        batch: PathBuf,
        /// Also score with the LLM judge
        #[arg(long)]
        judge: bool,
        /// Annotation CSV for inter-annotator agreement
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Output directory (defaults to the trace directory)
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print summary statistics of a series
    Stats {
        series: PathBuf,
        #[arg(long)]
        allow_gaps: bool,
    },
    /// Re-run a trace from its recorded responses and compare
    Replay { trace: PathBuf },
    /// Run the full configuration and each ablation variant
    Ablate {
        series: PathBuf,
        #[arg(long)]
        allow_gaps: bool,
        /// Score each variant's caption with the LLM judge
        #[arg(long)]
        judge: bool,
    },
    /// Token consumption and convergence report over traces
    Report {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        /// Token count of the single-pass baseline
        #[arg(long)]
        baseline: u64,
        /// Output directory for CSVs (defaults to the trace directory)
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

/// Error carrying the process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn backend_failure(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<BackendError>().is_some()
            || e.downcast_ref::<RunError>()
                .is_some_and(|r| r.source.backend_error().is_some())
            || matches!(e.downcast_ref::<EvalError>(), Some(EvalError::Backend(_)))
    })
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(error: E) -> Self {
        let error = error.into();
        let code = if backend_failure(&error) {
            EXIT_BACKEND
        } else {
            EXIT_INPUT
        };
        Self { code, error }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = load_config(&cli.global)?;
    match cli.command {
        Command::Caption { series, allow_gaps } => cmd_caption(&config, &series, allow_gaps, cli.global.jobs),
        Command::Evaluate {
            batch,
            judge,
            annotations,
            out_dir,
        } => cmd_evaluate(&config, &batch, judge, annotations.as_deref(), out_dir, cli.global.jobs),
        Command::Stats { series, allow_gaps } => cmd_stats(&series, allow_gaps).map_err(Failure::from),
        Command::Replay { trace } => cmd_replay(&trace).map_err(Failure::from),
        Command::Ablate {
            series,
            allow_gaps,
            judge,
        } => cmd_ablate(&config, &series, allow_gaps, judge),
        Command::Report {
            traces,
            baseline,
            out_dir,
        } => cmd_report(&config, &traces, baseline, out_dir).map_err(Failure::from),
    }
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut config = RunConfig::load_or_default(g.config.as_deref())?;
    config.apply(&ConfigOverrides {
        trace_dir: g.trace_dir.clone(),
        cache_dir: g.cache_dir.clone(),
        seed_role: g.seed_role,
        trace_similarities: g.trace_similarities.then_some(true),
        embed_templates: g.embed_templates.then_some(true),
        script: g.script.clone(),
    });
    config.validate()?;
    if g.jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    Ok(config)
}

fn load_series(path: &Path, allow_gaps: bool) -> Result<WeatherSeries> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let station = path
        .file_stem()
        .map_or("series".into(), |s| s.to_string_lossy().into_owned());
    let series = parse_series(&bytes, InputFormat::from_path(path), allow_gaps, &station)
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(series)
}

fn provider(config: &RunConfig) -> Result<Arc<dyn CompletionProvider>> {
    Ok(ProviderRegistry::with_builtins().build(&config.backend)?)
}

fn cache(config: &RunConfig) -> Result<Option<ResponseCache>> {
    if !config.cache.enabled {
        return Ok(None);
    }
    let c = ResponseCache::new(&config.cache.dir)
        .with_context(|| format!("creating cache directory {}", config.cache.dir.display()))?;
    Ok(Some(c))
}

fn templates(config: &RunConfig) -> Result<TemplateSet> {
    Ok(TemplateSet::load(config.templates.dir.as_deref())?)
}

fn engine(config: &RunConfig) -> Result<Engine> {
    let embedder = EmbedderRegistry::with_builtins().build(&config.embedding)?;
    let provider = provider(config)?;
    let cache = if provider.cacheable() { cache(config)? } else { None };
    Ok(Engine::new(provider, embedder, templates(config)?, config.clone())?.with_cache(cache))
}

fn judge(config: &RunConfig) -> Result<Judge> {
    let defaults = RequestDefaults::from_config(&config.backend)?;
    let provider = provider(config)?;
    let cache = if provider.cacheable() { cache(config)? } else { None };
    Ok(Judge::new(provider, defaults, templates(config)?).with_cache(cache))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?)
}

fn caption_one(engine: &Engine, path: &Path, allow_gaps: bool) -> Result<String> {
    let series = load_series(path, allow_gaps)?;
    let run_id = derive_run_id(&series, engine.config());
    let mut writer = TraceWriter::create(&engine.config().trace.dir, &run_id)?;
    let outcome = engine.run(&series, &run_id, Some(&mut writer));
    eprintln!("trace: {}", writer.path().display());
    Ok(outcome?.caption.text)
}

fn cmd_caption(config: &RunConfig, series: &[PathBuf], allow_gaps: bool, jobs: usize) -> Result<(), Failure> {
    let engine = engine(config)?;
    let results: Vec<Result<String>> =
        pool(jobs)?.install(|| series.par_iter().map(|p| caption_one(&engine, p, allow_gaps)).collect());
    let mut worst: Option<Failure> = None;
    for (path, result) in series.iter().zip(results) {
        match result {
            Ok(caption) if series.len() == 1 => println!("{caption}"),
            Ok(caption) => println!("{}\t{caption}", path.display()),
            Err(e) => {
                let f = Failure::from(e.context(format!("{}", path.display())));
                if series.len() > 1 {
                    eprintln!("error: {:#}", f.error);
                }
                if worst.as_ref().is_none_or(|w| f.code > w.code) {
                    worst = Some(f);
                }
            }
        }
    }
    match worst {
        None => Ok(()),
        Some(f) if series.len() == 1 => Err(f),
        Some(f) => Err(Failure {
            code: f.code,
            error: anyhow::anyhow!("one or more series failed"),
        }),
    }
}

fn cmd_evaluate(
    config: &RunConfig,
    batch_path: &Path,
    use_judge: bool,
    annotations: Option<&Path>,
    out_dir: Option<PathBuf>,
    jobs: usize,
) -> Result<(), Failure> {
    let items = load_batch(batch_path)?;
    let base_dir = batch_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let judge = if use_judge { Some(judge(config)?) } else { None };
    let max_rows = config.optimizer.max_rows;
    let results = pool(jobs)?.install(|| {
        items
            .par_iter()
            .map(|item| evaluate_item(item, &base_dir, judge.as_ref(), max_rows))
            .collect::<Vec<_>>()
    });
    let summary = summarize_results(&results);
    let out_dir = out_dir.unwrap_or_else(|| config.trace.dir.clone());
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let stem = batch_path
        .file_stem()
        .map_or("batch".into(), |s| s.to_string_lossy().into_owned());
    let jsonl = out_dir.join(format!("{stem}.scores.jsonl"));
    let csv = out_dir.join(format!("{stem}.summary.csv"));
    std::fs::write(&jsonl, results_jsonl(&results)).with_context(|| format!("writing {}", jsonl.display()))?;
    std::fs::write(&csv, summary_csv(&summary)).with_context(|| format!("writing {}", csv.display()))?;

    let fmt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
    println!("samples: {} (failed {})", summary.samples, summary.failed);
    println!(
        "bleu4: {}  rouge_l_f1: {}",
        fmt(summary.bleu4, 4),
        fmt(summary.rouge_l_f1, 4)
    );
    if use_judge {
        println!(
            "SA: {}  PC: {}  MR: {}  OQ: {}",
            fmt(summary.sa, 1),
            fmt(summary.pc, 1),
            fmt(summary.mr, 1),
            fmt(summary.oq, 1)
        );
    }
    if let Some(path) = annotations {
        let table = AnnotationTable::load(path)?;
        let alpha = krippendorff_alpha(&table)?;
        println!("krippendorff_alpha: {alpha:.4}");
    }
    eprintln!("scores: {}\nsummary: {}", jsonl.display(), csv.display());

    if summary.failed == 0 {
        return Ok(());
    }
    let backend = results.iter().any(|r| r.backend_failure);
    Err(Failure {
        code: if backend { EXIT_BACKEND } else { EXIT_INPUT },
        error: anyhow::anyhow!("{} of {} samples failed", summary.failed, summary.samples),
    })
}

fn cmd_stats(path: &Path, allow_gaps: bool) -> Result<()> {
    let series = load_series(path, allow_gaps)?;
    let summary = summarize(&series);
    println!("station {}: {} observations", series.station_id, series.len());
    print!("{}", render_stats_table(&summary));
    Ok(())
}

fn cmd_replay(path: &Path) -> Result<()> {
    let trace = RunTrace::load(path)?;
    match replay(&trace, &EmbedderRegistry::with_builtins()) {
        Ok(r) => {
            println!("identical: {} ({} iterations)", r.run_id, r.iterations);
            Ok(())
        }
        Err(e @ ReplayError::Divergence(_)) => Err(anyhow::Error::new(e).context(format!("{}", path.display()))),
        Err(e) => Err(e.into()),
    }
}

fn cmd_ablate(config: &RunConfig, path: &Path, allow_gaps: bool, use_judge: bool) -> Result<(), Failure> {
    let series = load_series(path, allow_gaps)?;
    let engine = engine(config)?;
    let run_id = derive_run_id(&series, config);
    let outcomes = run_ablation(&engine, &series, &run_id, Some(&config.trace.dir));
    let judge = if use_judge { Some(judge(config)?) } else { None };
    let table = serialize_for_prompt(&series, &summarize(&series), config.optimizer.max_rows);

    let mut rows = Vec::new();
    let mut worst = 0u8;
    for o in &outcomes {
        let mut row = AblationRow::from_outcome(o);
        if let Err(e) = &o.result {
            let code = if e.source.backend_error().is_some() {
                EXIT_BACKEND
            } else {
                EXIT_INPUT
            };
            worst = worst.max(code);
            eprintln!("{}: {e}", o.variant);
        }
        if let (Some(j), Ok(out)) = (&judge, &o.result) {
            match j.judge(&out.caption.text, &table) {
                Ok((s, _)) => (row.sa, row.pc, row.mr, row.oq) = (Some(s.sa), Some(s.pc), Some(s.mr), Some(s.oq)),
                Err(e) => {
                    eprintln!("{}: judge failed: {e}", o.variant);
                    row.error = format!("judge: {e}");
                }
            }
        }
        println!(
            "{:<22} {:<7} iterations={} gradient_calls={} tokens={}",
            row.variant, row.status, row.iterations, row.gradient_calls, row.total_tokens
        );
        rows.push(row);
    }
    let csv_path = config.trace.dir.join(format!("{run_id}.ablation.csv"));
    std::fs::write(&csv_path, comparison_csv(&rows)).with_context(|| format!("writing {}", csv_path.display()))?;
    eprintln!("comparison: {}", csv_path.display());
    if worst > 0 {
        return Err(Failure {
            code: worst,
            error: anyhow::anyhow!("one or more ablation variants failed"),
        });
    }
    Ok(())
}

fn cmd_report(config: &RunConfig, paths: &[PathBuf], baseline: u64, out_dir: Option<PathBuf>) -> Result<()> {
    let traces = paths
        .iter()
        .map(|p| RunTrace::load(p).with_context(|| format!("{}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let report = report(&traces, baseline)?;
    print!("{}", report.to_text());
    let out_dir = out_dir.unwrap_or_else(|| config.trace.dir.clone());
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    for (name, body) in [
        ("report_runs.csv", report.runs_csv()),
        ("report_similarity.csv", report.similarity_csv()),
    ] {
        let path = out_dir.join(name);
        std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

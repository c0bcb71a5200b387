use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use persd_core::config::{BackendKind, ConfigError, PipelineConfig};
use persd_core::domain::{Attempt, ExecutionFeedback, RefinementRecord, Task, Variant};
use persd_core::evaluator::{report_table, run_inference, run_two_step, EvalReport};
use persd_core::exec::Executor;
use persd_core::gateway::{ledger_report, ChatBackend, CostRow, Gateway, HttpBackend, RecordingBackend, ReplayBackend};
use persd_core::io::{read_jsonl, to_jsonl, write_atomic};
use persd_core::manifest::{up_to_date, InputDigest, Manifest, RunKey};
use persd_core::overlap::{analyze_overlap, emit_cleaned_benchmark, overlap_report, OverlapJudgment};
use persd_core::pipeline::{
    build_stand_corpus, collect_personalised_refinements, collect_student_attempts, emit_variant, first_failures,
    PipelineRound, RoundStats, Services,
};
use persd_core::prompting::PromptSet;

#[derive(Parser)]
#[command(name = "persd", version, about = "Personalised distillation data pipeline and code-generation evaluation")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, default_value = "persd.toml")]
    config: PathBuf,
    /// Rerun even when manifests show the outputs are current.
    #[arg(long, global = true)]
    force: bool,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the teacher-written training corpus from seed tasks.
    GenCorpus,
    /// Sample student attempts on every corpus task and execute them.
    Attempts {
        #[arg(long, default_value_t = 1)]
        round: u32,
    },
    /// Ask the teacher to repair each task's first failing attempt.
    Refine {
        #[arg(long, default_value_t = 1)]
        round: u32,
    },
    /// Write one finetuning dataset variant.
    Emit {
        #[arg(long)]
        variant: String,
        #[arg(long, default_value_t = 1)]
        round: u32,
    },
    /// Score an endpoint on the benchmark.
    Eval {
        #[arg(long)]
        profile: String,
        #[arg(long)]
        two_step: bool,
        /// Endpoint name; defaults to the student.
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Judge benchmark tasks against their nearest training tasks.
    Overlap,
    /// Drop benchmark tasks judged to be leaked.
    CleanBenchmark,
    /// Tabulate evaluation reports and spend.
    Report,
}

#[derive(Serialize, Deserialize)]
struct AttemptLine {
    attempt: Attempt,
    feedback: ExecutionFeedback,
}

struct Ctx {
    config: PipelineConfig,
    config_hash: String,
    force: bool,
    services: Services,
    recorder: Option<Arc<RecordingBackend>>,
}

/// Output files for one stage, written together once the stage finishes.
struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
    partial: bool,
}

impl Outputs {
    fn new() -> Self {
        Self { files: Vec::new(), partial: false }
    }

    fn add(mut self, path: PathBuf, bytes: impl Into<Vec<u8>>) -> Self {
        self.files.push((path, bytes.into()));
        self
    }

    fn json<T: Serialize>(self, path: PathBuf, value: &T) -> Self {
        let mut text = serde_json::to_string_pretty(value).expect("serialisable");
        text.push('\n');
        self.add(path, text)
    }

    fn partial(mut self, partial: bool) -> Self {
        self.partial = partial;
        self
    }
}

impl Ctx {
    fn new(config: PipelineConfig, force: bool) -> Result<Self> {
        let inner: Arc<dyn ChatBackend> = match config.backend.kind {
            BackendKind::Http => Arc::new(
                HttpBackend::new(Duration::from_millis(config.backend.request_timeout_ms)).map_err(|e| anyhow!("{e}"))?,
            ),
            BackendKind::Replay => {
                let path = config.backend.transcript.as_ref().expect("validated");
                Arc::new(ReplayBackend::from_jsonl(path).map_err(|e| anyhow!("missing_input: {}: {e}", path.display()))?)
            }
        };
        let (backend, recorder): (Arc<dyn ChatBackend>, _) = match &config.backend.record {
            Some(_) => {
                let r = Arc::new(RecordingBackend::new(inner));
                (r.clone(), Some(r))
            }
            None => (inner, None),
        };
        let executor = Executor::new(config.runner.clone(), config.limits)
            .map_err(|e| anyhow!("config_invalid: {e}"))?
            .with_wall_time(config.record_wall_time);
        let prompts = match &config.paths.templates {
            Some(dir) => PromptSet::load_dir(dir).map_err(|e| anyhow!("config_invalid: {e}"))?,
            None => PromptSet::builtin(),
        };
        let services =
            Services::new(Gateway::new(backend), executor).with_prompts(prompts).with_concurrency(config.concurrency);
        Ok(Self { config_hash: config.hash(), config, force, services, recorder })
    }

    fn out(&self, name: impl AsRef<Path>) -> PathBuf {
        self.config.paths.output_dir.join(name)
    }

    fn key(&self, command: &str, args: serde_json::Value, inputs: &[&Path]) -> Result<RunKey> {
        let inputs = inputs.iter().map(|p| InputDigest::of(p)).collect::<Result<Vec<_>, _>>()?;
        Ok(RunKey {
            command: command.into(),
            args,
            config_hash: self.config_hash.clone(),
            rng_seed: self.config.rng_seed,
            inputs,
        })
    }

    /// True (after telling the user) when every output is already current.
    fn skip(&self, key: &RunKey, outputs: &[PathBuf]) -> bool {
        if self.force || !outputs.iter().all(|o| up_to_date(o, key)) {
            return false;
        }
        for o in outputs {
            eprintln!("up to date: {}", o.display());
        }
        true
    }

    fn finish(&self, key: &RunKey, outputs: Outputs) -> Result<()> {
        let costs: Vec<CostRow> = ledger_report(&self.services.gateway.ledger());
        for (i, (path, bytes)) in outputs.files.iter().enumerate() {
            write_atomic(path, bytes)?;
            // Spend is attached to the first output only so that summing
            // manifests counts each run once.
            let costs = if i == 0 { costs.clone() } else { Vec::new() };
            Manifest::new(key.clone(), path, outputs.partial, costs)?.write(path)?;
            eprintln!("wrote {}{}", path.display(), if outputs.partial { " (partial)" } else { "" });
        }
        if let (Some(recorder), Some(path)) = (&self.recorder, &self.config.backend.record) {
            recorder.write_jsonl(path).with_context(|| format!("transcript {}", path.display()))?;
        }
        if outputs.partial {
            return Err(anyhow!("interrupted: partial outputs written"));
        }
        Ok(())
    }

    fn required<'a>(&self, path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        path.as_deref().ok_or_else(|| anyhow!(ConfigError::Invalid(format!("paths.{key} is not set"))))
    }
}

fn attempts_path(ctx: &Ctx, round: u32) -> PathBuf {
    ctx.out(format!("attempts.r{round}.jsonl"))
}

fn refinements_path(ctx: &Ctx, round: u32) -> PathBuf {
    ctx.out(format!("refinements.r{round}.jsonl"))
}

fn read_attempts(path: &Path) -> Result<Vec<(Attempt, ExecutionFeedback)>> {
    Ok(read_jsonl::<AttemptLine>(path)?.into_iter().map(|l| (l.attempt, l.feedback)).collect())
}

fn round_for(ctx: &Ctx, round: u32) -> Result<PipelineRound> {
    let mut r = PipelineRound::new(round, ctx.config.endpoints.student.clone());
    r.student_trained_rounds = ctx.config.student_trained_rounds;
    r.attempt_sampling = ctx.config.sampling.attempt;
    r.refine_sampling = ctx.config.sampling.teacher;
    r.validate()?;
    Ok(r)
}

async fn gen_corpus(ctx: &Ctx) -> Result<()> {
    let seeds_path = ctx.required(&ctx.config.paths.seeds, "seeds")?;
    let corpus_path = ctx.config.paths.corpus.clone();
    let stats_path = ctx.out("corpus_stats.json");
    let key = ctx.key("gen-corpus", json!({}), &[seeds_path])?;
    let outputs = [corpus_path.clone(), stats_path.clone()];
    if ctx.skip(&key, &outputs) {
        return Ok(());
    }
    let seeds: Vec<Task> = read_jsonl(seeds_path)?;
    let (corpus, stats) =
        build_stand_corpus(&seeds, &ctx.config.endpoints.teacher, &ctx.config.corpus_options(), &ctx.services).await?;
    let partial = stats.n_cancelled > 0;
    ctx.finish(&key, Outputs::new().add(corpus_path, to_jsonl(&corpus)).json(stats_path, &stats).partial(partial))
}

async fn attempts(ctx: &Ctx, round: u32) -> Result<()> {
    let r = round_for(ctx, round)?;
    let corpus_path = &ctx.config.paths.corpus;
    let out = attempts_path(ctx, round);
    let skipped = ctx.out(format!("attempts_skipped.r{round}.json"));
    let key = ctx.key("attempts", json!({ "round": round }), &[corpus_path])?;
    if ctx.skip(&key, &[out.clone(), skipped.clone()]) {
        return Ok(());
    }
    let corpus: Vec<Task> = read_jsonl(corpus_path)?;
    let result = collect_student_attempts(&corpus, &r.student_endpoint, &r.attempt_sampling, round, &ctx.services).await?;
    let lines: Vec<AttemptLine> =
        result.attempts.into_iter().map(|(attempt, feedback)| AttemptLine { attempt, feedback }).collect();
    ctx.finish(&key, Outputs::new().add(out, to_jsonl(&lines)).json(skipped, &result.skipped).partial(result.partial))
}

async fn refine(ctx: &Ctx, round: u32) -> Result<()> {
    let r = round_for(ctx, round)?;
    let corpus_path = &ctx.config.paths.corpus;
    let attempts_in = attempts_path(ctx, round);
    let out = refinements_path(ctx, round);
    let stats_path = ctx.out(format!("round_stats.r{round}.json"));
    let key = ctx.key("refine", json!({ "round": round }), &[corpus_path, &attempts_in])?;
    if ctx.skip(&key, &[out.clone(), stats_path.clone()]) {
        return Ok(());
    }
    let corpus: Vec<Task> = read_jsonl(corpus_path)?;
    let attempts = read_attempts(&attempts_in)?;
    let wrong = first_failures(&corpus, &attempts)?;
    let teacher = &ctx.config.endpoints.teacher;
    let (records, partial) = collect_personalised_refinements(&wrong, teacher, &r.refine_sampling, &ctx.services).await?;
    let stats = RoundStats {
        n_tasks_in: corpus.len(),
        n_wrong_attempts: wrong.len(),
        n_validated_refinements: records.iter().filter(|r| r.validated).count(),
        dollar_cost: ctx.services.gateway.ledger().dollar_cost(&teacher.name),
    };
    let round_record = PipelineRound { stats, ..r };
    ctx.finish(&key, Outputs::new().add(out, to_jsonl(&records)).json(stats_path, &round_record).partial(partial))
}

fn emit(ctx: &Ctx, variant: &str, round: u32) -> Result<()> {
    let variant: Variant = variant.parse().map_err(|e| anyhow!(ConfigError::Invalid(e)))?;
    let corpus_path = &ctx.config.paths.corpus;
    let attempts_in = attempts_path(ctx, round);
    let refinements_in = refinements_path(ctx, round);
    let out = ctx.out(format!("dataset.{}.r{round}.jsonl", variant.slug()));
    // StanD needs only the corpus.
    let inputs: Vec<&Path> = match variant {
        Variant::StanD => vec![corpus_path],
        _ => vec![corpus_path, &attempts_in, &refinements_in],
    };
    let key = ctx.key("emit", json!({ "variant": variant.as_str(), "round": round }), &inputs)?;
    if ctx.skip(&key, std::slice::from_ref(&out)) {
        return Ok(());
    }
    let corpus: Vec<Task> = read_jsonl(corpus_path)?;
    let (attempts, refinements) = match variant {
        Variant::StanD => (Vec::new(), Vec::new()),
        _ => (read_attempts(&attempts_in)?, read_jsonl::<RefinementRecord>(&refinements_in)?),
    };
    let records = emit_variant(variant, &corpus, &attempts, &refinements)?;
    ctx.finish(&key, Outputs::new().add(out, to_jsonl(&records)))
}

async fn eval(ctx: &Ctx, profile: &str, two_step: bool, endpoint: Option<&str>) -> Result<()> {
    let config = ctx.config.eval_profile(profile)?;
    let endpoint = match endpoint {
        Some(name) => ctx.config.endpoint(name)?,
        None => &ctx.config.endpoints.student,
    };
    let bench_path = ctx.required(&ctx.config.paths.benchmark, "benchmark")?;
    let stem = format!("{}.{profile}{}", endpoint.name, if two_step { ".two-step" } else { "" });
    let report_path = ctx.out(format!("eval.{stem}.json"));
    let samples_path = ctx.out(format!("eval_samples.{stem}.jsonl"));
    let key = ctx.key("eval", json!({ "profile": profile, "two_step": two_step, "endpoint": endpoint.name }), &[bench_path])?;
    if ctx.skip(&key, &[report_path.clone(), samples_path.clone()]) {
        return Ok(());
    }
    let bench: Vec<Task> = read_jsonl(bench_path)?;
    let run = if two_step {
        run_two_step(&bench, endpoint, &config, &ctx.services.prompts.refine, &ctx.services).await?
    } else {
        run_inference(&bench, endpoint, &config, &ctx.services).await?
    };
    let partial = ctx.services.cancelled();
    ctx.finish(&key, Outputs::new().json(report_path, &run.report).add(samples_path, to_jsonl(&run.samples)).partial(partial))
}

async fn overlap(ctx: &Ctx) -> Result<()> {
    let judge = ctx.config.endpoints.judge.as_ref().ok_or_else(|| anyhow!(ConfigError::Invalid("endpoints.judge is not set".into())))?;
    let bench_path = ctx.required(&ctx.config.paths.benchmark, "benchmark")?;
    let train_path = ctx.config.paths.train_corpus.as_ref().unwrap_or(&ctx.config.paths.corpus);
    let judgments_path = ctx.out("judgments.jsonl");
    let report_path = ctx.out("overlap_report.json");
    let key = ctx.key("overlap", json!({ "top_k": ctx.config.overlap.top_k }), &[bench_path, train_path])?;
    if ctx.skip(&key, &[judgments_path.clone(), report_path.clone()]) {
        return Ok(());
    }
    let bench: Vec<Task> = read_jsonl(bench_path)?;
    let train: Vec<Task> = read_jsonl(train_path)?;
    let analysis = analyze_overlap(&bench, &train, judge, ctx.config.overlap.top_k, &ctx.services).await?;
    let report = overlap_report(&analysis.judgments)?.with_exact_matches(&analysis.exact_matches);
    let report = json!({ "report": report, "skipped": analysis.skipped });
    ctx.finish(
        &key,
        Outputs::new().add(judgments_path, to_jsonl(&analysis.judgments)).json(report_path, &report).partial(analysis.partial),
    )
}

fn clean_benchmark(ctx: &Ctx) -> Result<()> {
    let bench_path = ctx.required(&ctx.config.paths.benchmark, "benchmark")?;
    let judgments_path = ctx.out("judgments.jsonl");
    let out = ctx.out("benchmark.cleaned.jsonl");
    let key = ctx.key("clean-benchmark", json!({}), &[bench_path, &judgments_path])?;
    if ctx.skip(&key, std::slice::from_ref(&out)) {
        return Ok(());
    }
    let bench: Vec<Task> = read_jsonl(bench_path)?;
    let judgments: Vec<OverlapJudgment> = read_jsonl(&judgments_path)?;
    let cleaned = emit_cleaned_benchmark(&bench, &judgments);
    eprintln!("kept {} of {} benchmark tasks", cleaned.len(), bench.len());
    ctx.finish(&key, Outputs::new().add(out, to_jsonl(&cleaned)))
}

fn sorted_files(dir: &Path, keep: impl Fn(&str) -> bool) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| anyhow!("missing_input: {}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(&keep))
        .collect();
    files.sort();
    Ok(files)
}

fn report(ctx: &Ctx) -> Result<()> {
    let dir = &ctx.config.paths.output_dir;
    let evals = sorted_files(dir, |n| n.starts_with("eval.") && n.ends_with(".json") && !n.ends_with(".manifest.json"))?;
    let manifests = sorted_files(dir, |n| n.ends_with(".manifest.json") && !n.starts_with("results.") && !n.starts_with("costs."))?;
    let inputs: Vec<&Path> = evals.iter().chain(&manifests).map(PathBuf::as_path).collect();
    let results_path = ctx.out("results.csv");
    let costs_path = ctx.out("costs.csv");
    let key = ctx.key("report", json!({}), &inputs)?;
    if ctx.skip(&key, &[results_path.clone(), costs_path.clone()]) {
        return Ok(());
    }

    let mut rows = Vec::new();
    for path in &evals {
        let text = std::fs::read_to_string(path)?;
        let r: EvalReport = serde_json::from_str(&text).with_context(|| format!("report: {}", path.display()))?;
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        rows.push((name.trim_start_matches("eval.").trim_end_matches(".json").to_string(), r));
    }
    let table = report_table(&rows)?;

    let mut totals: std::collections::BTreeMap<String, CostRow> = Default::default();
    for path in &manifests {
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)
            .with_context(|| format!("report: {}", path.display()))?;
        for row in m.costs {
            let t = totals.entry(row.endpoint.clone()).or_insert(CostRow { dollar_cost: 0.0, requests: 0, prompt_tokens: 0, completion_tokens: 0, ..row.clone() });
            t.requests += row.requests;
            t.prompt_tokens += row.prompt_tokens;
            t.completion_tokens += row.completion_tokens;
            t.dollar_cost += row.dollar_cost;
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in totals.values() {
        w.serialize(row)?;
    }
    let costs = w.into_inner().map_err(|e| anyhow!("{}", e.error()))?;
    print!("{table}");
    ctx.finish(&key, Outputs::new().add(results_path, table).add(costs_path, costs))
}

async fn run(cli: Cli) -> Result<()> {
    let config = PipelineConfig::load(&cli.config)?;
    let ctx = Ctx::new(config, cli.force)?;

    let cancel = ctx.services.cancel.clone();
    tokio::spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            eprintln!("interrupted: finishing in-flight work, press ctrl-c again to abort");
            cancel.store(true, Ordering::SeqCst);
            if tokio::signal::ctrl_c().await.is_ok() {
                std::process::exit(130);
            }
        }
    });

    match &cli.command {
        Command::GenCorpus => gen_corpus(&ctx).await,
        Command::Attempts { round } => attempts(&ctx, *round).await,
        Command::Refine { round } => refine(&ctx, *round).await,
        Command::Emit { variant, round } => emit(&ctx, variant, *round),
        Command::Eval { profile, two_step, endpoint } => eval(&ctx, profile, *two_step, endpoint.as_deref()).await,
        Command::Overlap => overlap(&ctx).await,
        Command::CleanBenchmark => clean_benchmark(&ctx),
        Command::Report => report(&ctx),
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| level.into()))
        .with_writer(std::io::stderr)
        .init();
    match run(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::FAILURE
        }
    }
}

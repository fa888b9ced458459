use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use xshot::benchmark::{self, Assignment, Preset, SplitSpec, XShotBenchmark};
use xshot::eval::{self, ScoreTable, ThresholdGrid};
use xshot::indirect::{self, NegativeSource, ScheduleMode};
use xshot::model::{self, LabelSpace, RawInstance, ScoreRecord, TaskRecord, TripletExample};
use xshot::pipeline::{self, RunConfig, Stage};
use xshot::prompting::{self, WeakGenSpec};
use xshot::scoring::{self, BackendConfig, CompletionParams};
use xshot::triplets::{self, NegativeMode, RenderTemplate};
use xshot::{io, Error, Result};

#[derive(Parser)]
#[command(name = "xshot", version, about = "Open-shot text classification benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition labels and carve train/dev/test from a raw corpus.
    Split(SplitArgs),
    /// Expand a benchmark split into triplets.
    Triplets(TripletArgs),
    /// Build yes/no pairs from an instruction-tuning task collection.
    Indirect(IndirectArgs),
    /// Ablation helpers.
    Ablate {
        #[command(subcommand)]
        command: AblateCommand,
    },
    /// Generate weak instances for zero-shot labels with a completion backend.
    Weakgen(WeakgenArgs),
    /// Score triplets with a backend.
    Score(ScoreArgs),
    /// Tune the "None" threshold on dev scores.
    Tune(TuneArgs),
    /// Evaluate test scores and print the accuracy table.
    Eval(EvalArgs),
    /// Run pipeline stages from a config file.
    Run(RunArgs),
    /// Check a raw corpus against a label space.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// SplitSpec JSON; takes precedence over --preset.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Label space JSON with a fixed group assignment.
    #[arg(long)]
    assignment: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum TripletMode {
    Eval,
    Train,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitName {
    Train,
    Dev,
    Test,
}

#[derive(Args)]
struct TripletArgs {
    #[arg(long)]
    benchmark: PathBuf,
    /// Preset id (e.g. maven-a) or template JSON.
    #[arg(long)]
    template: String,
    #[arg(long, value_enum, default_value = "eval")]
    mode: TripletMode,
    /// Split to expand in eval mode.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    #[arg(long, default_value = "all")]
    negatives: String,
    /// Extra training instances (e.g. weak supervision) for train mode.
    #[arg(long)]
    extra_train: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IndirectArgs {
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long, default_value_t = indirect::DEFAULT_CAP)]
    cap: usize,
    #[arg(long, default_value_t = indirect::DEFAULT_MAX_WORDS)]
    max_words: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Drop the k tasks most similar to --target-instruction.
    #[arg(long, default_value_t = indirect::DEFAULT_FILTER_K)]
    filter_similar: usize,
    #[arg(long)]
    target_instruction: Option<PathBuf>,
    /// Embedding backend used by the similarity filter.
    #[arg(long, default_value = "hash-mock")]
    embed_backend: String,
    #[arg(long, value_parser = parse_negative_source, default_value = "other-instances")]
    negative_source: NegativeSource,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum AblateCommand {
    /// Print the seven-step tasks/instances schedule as JSON.
    Schedule {
        #[arg(long, value_parser = parse_schedule_mode)]
        mode: ScheduleMode,
        /// Number of source tasks available.
        #[arg(long, conflicts_with = "tasks")]
        available: Option<usize>,
        /// Task collection to count instead of --available.
        #[arg(long)]
        tasks: Option<PathBuf>,
    },
}

#[derive(Args)]
struct WeakgenArgs {
    #[arg(long)]
    benchmark: PathBuf,
    /// Schema preset (maven, fewrel, rams) or WeakGenSpec JSON.
    #[arg(long)]
    schema: String,
    #[arg(long)]
    per_label: Option<usize>,
    #[arg(long)]
    backend: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = CompletionParams::default().max_tokens)]
    max_tokens: u32,
    #[arg(long, default_value_t = CompletionParams::default().temperature)]
    temperature: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    triplets: PathBuf,
    /// Config file, URL, or mock name.
    #[arg(long)]
    backend: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    benchmark: PathBuf,
    #[arg(long, default_value = "0.5:1.0:0.01")]
    grid: String,
    #[arg(long, default_value = "")]
    template: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    benchmark: PathBuf,
    /// A number or a tune.json file.
    #[arg(long)]
    threshold: Option<String>,
    #[arg(long)]
    template: Option<String>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated stages, or "all" for every stage the config sets up.
    #[arg(long, default_value = "all")]
    stages: String,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Label space JSON.
    #[arg(long)]
    labels: PathBuf,
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse::<Preset>().map_err(|e| e.to_string())
}

fn parse_negative_source(s: &str) -> std::result::Result<NegativeSource, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown negative source {s:?}"))
}

fn parse_schedule_mode(s: &str) -> std::result::Result<ScheduleMode, String> {
    s.parse::<ScheduleMode>().map_err(|e| e.to_string())
}

fn split(a: SplitArgs) -> Result<()> {
    let spec: SplitSpec = match (&a.spec, a.preset) {
        (Some(p), _) => io::read_json(p)?,
        (None, Some(p)) => p.spec(),
        (None, None) => return Err(Error::InvalidArgument("give --preset or --spec".into())),
    };
    let assignment = match &a.assignment {
        Some(p) => Assignment::Explicit(io::read_json::<LabelSpace>(p)?),
        None => Assignment::Seeded,
    };
    let m = benchmark::build_benchmark(&a.dataset, &spec, a.preset, a.seed, &assignment, &a.out)?;
    println!(
        "train {}  dev {}  test {}  ({} labels, {} dropped)",
        m.totals.train,
        m.totals.dev,
        m.totals.test,
        m.per_label.len(),
        m.dropped_labels.len()
    );
    Ok(())
}

fn triplets_cmd(a: TripletArgs) -> Result<()> {
    let bench = XShotBenchmark::load(&a.benchmark)?;
    let tmpl = RenderTemplate::resolve(&a.template)?;
    let out = match a.mode {
        TripletMode::Train => {
            let mut train = bench.train;
            if let Some(p) = &a.extra_train {
                train.extend(io::read_jsonl::<RawInstance>(p)?);
            }
            let negatives: NegativeMode = a.negatives.parse()?;
            triplets::build_target_training_set(&train, &bench.space, &tmpl, negatives, a.seed)?
        }
        TripletMode::Eval => {
            let split = match a.split {
                SplitName::Train => &bench.train,
                SplitName::Dev => &bench.dev,
                SplitName::Test => &bench.test,
            };
            triplets::expand_split(split, &bench.space, &tmpl)?
        }
    };
    io::write_jsonl(&a.out, &out)?;
    println!("{} triplets", out.len());
    Ok(())
}

fn indirect_cmd(a: IndirectArgs) -> Result<()> {
    let mut tasks: Vec<TaskRecord> = io::read_jsonl(&a.tasks)?;
    if let (Some(target), true) = (&a.target_instruction, a.filter_similar > 0) {
        let target = std::fs::read_to_string(target).map_err(|e| Error::io(target, e))?;
        let cfg = BackendConfig::resolve(&a.embed_backend)?;
        let mut texts: Vec<String> = tasks.iter().map(|t| t.definition.clone()).collect();
        texts.push(target.trim().to_string());
        let mut vectors = scoring::embed_texts(&texts, &cfg)?;
        let target_vec = vectors.pop().expect("target embedded");
        let outcome = indirect::filter_similar_tasks(&tasks, &vectors, &target_vec, a.filter_similar)?;
        for r in &outcome.removed {
            eprintln!("removed {} (cosine {:.4})", r.task_id, r.similarity);
        }
        tasks = outcome.kept;
    }
    let data = indirect::build_indirect_dataset(&tasks, a.cap, a.max_words, a.seed, a.negative_source)?;
    for w in &data.warnings {
        log::warn!("{w}");
    }
    io::write_jsonl(&a.out, &data.pairs)?;
    println!(
        "{} tasks, {} instances sampled, {} skipped, {} pairs",
        data.stats.tasks, data.stats.sampled_instances, data.stats.skipped_instances, data.stats.pairs
    );
    Ok(())
}

fn ablate(cmd: AblateCommand) -> Result<()> {
    let AblateCommand::Schedule { mode, available, tasks } = cmd;
    let n = match (available, tasks) {
        (Some(n), _) => n,
        (None, Some(p)) => io::read_jsonl::<TaskRecord>(&p)?.len(),
        (None, None) => return Err(Error::InvalidArgument("give --available or --tasks".into())),
    };
    let s = indirect::build_ablation_schedule(mode, n)?;
    if let Some(w) = &s.warning {
        log::warn!("{w}");
    }
    println!("{}", serde_json::to_string_pretty(&s.points).expect("serializes"));
    Ok(())
}

fn weakgen(a: WeakgenArgs) -> Result<()> {
    let space = benchmark::load_space(&a.benchmark)?;
    let train: Vec<RawInstance> = io::read_jsonl(&a.benchmark.join(benchmark::TRAIN_FILE))?;
    let mut spec = WeakGenSpec::resolve(&a.schema)?;
    if let Some(n) = a.per_label {
        spec = WeakGenSpec::new(spec.field_schema, spec.demos_per_prompt, n, spec.max_retries)?;
    }
    let backend = BackendConfig::resolve(&a.backend)?.completer()?;
    let params = CompletionParams {
        max_tokens: a.max_tokens,
        temperature: a.temperature,
    };
    let pool = prompting::weak_demo_pool(&train, &space);
    let labels = prompting::zero_labels(&space);
    let g = prompting::generate_weak_instances(&labels, &pool, &spec, backend.as_ref(), &params, a.seed)?;
    for s in &g.shortfalls {
        log::warn!("label {:?}: {} of {} instances", s.label, s.produced, s.required);
    }
    io::write_jsonl(&a.out, &prompting::weak_to_raw(&g.instances, &spec))?;
    println!("{} instances, {} shortfalls, {} backend calls", g.instances.len(), g.shortfalls.len(), g.backend_calls);
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let triplets: Vec<TripletExample> = io::read_jsonl(&a.triplets)?;
    let cfg = BackendConfig::resolve(&a.backend)?;
    let scores = scoring::score_triplets(&triplets, &cfg)?;
    io::write_jsonl(&a.out, &scores)?;
    println!("{} scores", scores.len());
    Ok(())
}

fn split_of(dir: &Path, scores: &[ScoreRecord], space: &LabelSpace) -> Result<(Vec<RawInstance>, ScoreTable)> {
    // Scores may belong to either evaluation split; pick the one they cover.
    let mut last = None;
    for file in [benchmark::DEV_FILE, benchmark::TEST_FILE] {
        let instances: Vec<RawInstance> = io::read_jsonl(&dir.join(file))?;
        let ids: Vec<String> = instances.iter().map(|i| i.id.clone()).collect();
        match ScoreTable::build(scores, space, &ids) {
            Ok(t) => return Ok((instances, t)),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("two splits tried"))
}

fn tune(a: TuneArgs) -> Result<()> {
    let space = benchmark::load_space(&a.benchmark)?;
    let grid: ThresholdGrid = a.grid.parse()?;
    let scores: Vec<ScoreRecord> = io::read_jsonl(&a.scores)?;
    let instances: Vec<RawInstance> = io::read_jsonl(&a.benchmark.join(benchmark::DEV_FILE))?;
    let ids: Vec<String> = instances.iter().map(|i| i.id.clone()).collect();
    let table = ScoreTable::build(&scores, &space, &ids)?;
    let record = pipeline::tune_from_files(&space, &instances, &table, &grid, &a.template)?;
    if let Some(w) = &record.warning {
        log::warn!("{w}");
    }
    match (record.threshold, record.dev_accuracy) {
        (Some(t), Some(acc)) => println!("threshold {t}  dev accuracy {:.2}", acc * 100.0),
        _ => println!("no threshold"),
    }
    if let Some(out) = &a.out {
        io::write_json(out, &record)?;
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let space = benchmark::load_space(&a.benchmark)?;
    let scores: Vec<ScoreRecord> = io::read_jsonl(&a.scores)?;
    let (instances, table) = split_of(&a.benchmark, &scores, &space)?;
    let threshold = match &a.threshold {
        Some(t) => pipeline::read_threshold(t)?,
        None => None,
    };
    let report = pipeline::evaluate_from_files(&space, &instances, &table, threshold, a.template.clone())?;
    if let Some(path) = &a.report {
        io::write_json(path, &report)?;
    }
    print!("{}", eval::render_table(&report, a.template.as_deref().unwrap_or("run")));
    print!("{}", eval::render_confusion(&eval::confusion_report(&report, &space, a.top_k)));
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let stages = match a.stages.trim() {
        "all" => cfg.configured_stages(),
        list => Stage::parse_list(list)?,
    };
    let manifest = pipeline::run_pipeline(&cfg, &stages)?;
    for s in &manifest.stages {
        println!("{:<9} {:?}  {} ms  {} backend calls", s.stage.name(), s.status, s.elapsed_ms, s.backend_calls);
    }
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    let report = pipeline::Layout::new(&cfg.out_dir).report_text();
    if stages.contains(&Stage::Eval) && report.exists() {
        print!("{}", std::fs::read_to_string(&report).map_err(|e| Error::io(&report, e))?);
    }
    Ok(())
}

fn validate(a: ValidateArgs) -> Result<()> {
    let space: LabelSpace = io::read_json(&a.labels)?;
    let instances: Vec<RawInstance> = io::read_jsonl(&a.dataset)?;
    let violations = model::validate_dataset(&instances, &space);
    if violations.is_empty() {
        println!("{} instances ok", instances.len());
        Ok(())
    } else {
        Err(Error::Validation(violations))
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Split(a) => split(a),
        Command::Triplets(a) => triplets_cmd(a),
        Command::Indirect(a) => indirect_cmd(a),
        Command::Ablate { command } => ablate(command),
        Command::Weakgen(a) => weakgen(a),
        Command::Score(a) => score(a),
        Command::Tune(a) => tune(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Run(a) => run(a),
        Command::Validate(a) => validate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

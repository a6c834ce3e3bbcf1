mod io;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use curate_core::corpus::{self, Lang, TokenizerSpec};
use curate_core::datagen::annotate::{annotate_corpus, rewrite_as_textbook, select_for_augmentation};
use curate_core::datagen::safety::{dataset_stats, read_topics, run_safety, write_safety_outputs, GeneratedSample, SafetyConfig};
use curate_core::datagen::{AnnotationClient, Annotator, AnnotatorConfig, HttpClient, MockClient, RetryPolicy, Templates};
use curate_core::dedup::{dedup_corpus, DedupConfig, ShingleUnit};
use curate_core::evalkit::codeswitch::code_switch_eval;
use curate_core::evalkit::constraints::{batch_metrics, check_constraints, filter_rejected, IfSample};
use curate_core::evalkit::longctx::{build_longctx_qa, QaItem, DEFAULT_MIN_TOKENS};
use curate_core::evalkit::niah::{build_niah, score_niah, NiahCase, NiahConfig};
use curate_core::heuristics::{filter_corpus, FilterThresholds};
use curate_core::kd::{kd_loss_batch, KdParams, KlDirection, TopKLogitRecord};
use curate_core::merge::merge_from_recipe;
use curate_core::mixture::{self, compose, validate_manifest, MixtureSpec};
use curate_core::pipeline::{self, RunConfig};
use curate_core::quality::{self, apply_threshold_stage, LabeledDoc, LinearScorer, NGramClassifier, ScoreMode, ThresholdRule, TrainParams};

use io::{read_json, read_jsonl, write_json, write_jsonl, Outputs};

#[derive(Parser)]
#[command(name = "curate", version, about = "Corpus curation, evaluation and model-merging toolkit")]
struct Cli {
    /// Global seed; sub-seeds are derived from it per stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Token counter: whitespace, char, thai-aware or external:<id>.
    #[arg(long, global = true)]
    tokenizer: Option<TokenizerSpec>,
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Near-duplicate removal with MinHash LSH.
    Dedup(DedupArgs),
    /// Line- and document-level heuristic filtering.
    Filter(FilterArgs),
    /// Train the hashed n-gram classifier on labeled shards.
    ClassifyTrain(ClassifyTrainArgs),
    /// Score documents and keep those passing a threshold rule.
    ClassifyApply(ClassifyApplyArgs),
    /// Compose a mixture from a spec file.
    Mix(MixArgs),
    /// Seeded sample under a token budget.
    Subsample(SubsampleArgs),
    /// Code-switching accuracy over responses.
    EvalCs(EvalCsArgs),
    /// Check responses against verifiable instruction constraints.
    CheckIf(CheckIfArgs),
    /// Build needle-in-a-haystack cases.
    BuildNiah(BuildNiahArgs),
    /// Score responses to needle-in-a-haystack cases.
    ScoreNiah(ScoreNiahArgs),
    /// Pad QA contexts with filler documents.
    BuildLongctx(BuildLongctxArgs),
    /// Top-k distillation loss over logit records.
    KdLoss(KdLossArgs),
    /// DARE-linear merge from a recipe.
    Merge(MergeArgs),
    /// Generate a labeled safety dataset through an annotation client.
    SafetyGen(SafetyGenArgs),
    /// Label documents on an integer scale through an annotation client.
    Annotate(AnnotateArgs),
    /// Corpus statistics.
    Stats(StatsArgs),
    /// Execute a pipeline config.
    Run(ConfigArgs),
    /// Print the resolved plan for a pipeline config without running it.
    Explain(ConfigArgs),
}

#[derive(Args)]
struct DedupArgs {
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with dedup parameters; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    num_perm: Option<usize>,
    #[arg(long)]
    bands: Option<usize>,
    #[arg(long)]
    ngram: Option<usize>,
    /// Shingle unit: word or char.
    #[arg(long)]
    unit: Option<String>,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// JSON thresholds; unspecified fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ClassifyTrainArgs {
    /// Shards whose documents carry a `label` meta field.
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// JSON training parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Args)]
struct ClassifyApplyArgs {
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// `name:gt|ge:value[:lo..hi]`, or a preset: quality, culture, education.
    #[arg(long, default_value = "quality:gt:0.5")]
    rule: String,
    /// `class:<label>` or `expected`; defaults to `class:pos` on a 0..1
    /// scale and `expected` otherwise.
    #[arg(long)]
    score: Option<String>,
}

#[derive(Args)]
struct MixArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Allowed absolute deviation of realized language shares.
    #[arg(long, default_value_t = 0.005)]
    tolerance: f64,
}

#[derive(Args)]
struct SubsampleArgs {
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    budget: u64,
}

#[derive(Args)]
struct EvalCsArgs {
    /// JSONL of strings or objects with a `response` field.
    #[arg(long = "in")]
    input: PathBuf,
    /// Foreign letters allowed before a response fails.
    #[arg(long, default_value_t = 0)]
    tolerance: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckIfArgs {
    /// JSONL of {instruction, constraints, response}.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildNiahArgs {
    #[arg(long, required = true, num_args = 1..)]
    haystack: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    lengths: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    depths: Vec<f64>,
    /// Shard file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, requires_all = ["question", "answer_key"])]
    needle: Option<String>,
    #[arg(long)]
    question: Option<String>,
    #[arg(long)]
    answer_key: Option<String>,
}

#[derive(Args)]
struct ScoreNiahArgs {
    #[arg(long)]
    cases: PathBuf,
    /// JSONL of strings or objects with a `response` field, one per case.
    #[arg(long)]
    responses: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildLongctxArgs {
    /// JSONL of {id, context, question, answer}.
    #[arg(long)]
    qa: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    fillers: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MIN_TOKENS)]
    min_tokens: usize,
    /// JSONL file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct KdLossArgs {
    /// JSONL of logit records.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// student-teacher or teacher-student.
    #[arg(long, default_value = "student-teacher")]
    direction: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MergeArgs {
    /// YAML or JSON recipe; model ids resolve against its directory.
    #[arg(long)]
    recipe: PathBuf,
    /// Tensor-map file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClientArgs {
    /// Scripted mock client (JSON); no network access.
    #[arg(long, conflicts_with = "endpoint")]
    mock: Option<PathBuf>,
    /// Base URL of an OpenAI-compatible API, e.g. https://host/v1.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value = curate_core::datagen::http::DEFAULT_KEY_ENV)]
    key_env: String,
    #[arg(long, default_value = "annotator")]
    model: String,
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
    #[arg(long, default_value_t = 4)]
    max_attempts: u32,
    /// Directory of `name.vN.txt` prompt templates overriding the built-ins.
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args)]
struct SafetyGenArgs {
    #[arg(long)]
    topics: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON safety-run parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    client: ClientArgs,
}

#[derive(Args)]
struct AnnotateArgs {
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    rubric: String,
    #[arg(long, default_value_t = 1)]
    lo: i64,
    #[arg(long, default_value_t = 5)]
    hi: i64,
    /// Also rewrite this fraction of the input as textbook-style passages.
    #[arg(long)]
    textbook_fraction: Option<f64>,
    #[command(flatten)]
    client: ClientArgs,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Also report harmful/unharmful balance from `label`/`topic` metadata.
    #[arg(long)]
    safety: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
}

struct Globals {
    seed: Option<u64>,
    tokenizer_flag: Option<TokenizerSpec>,
    tokenizer: TokenizerSpec,
}

impl Globals {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    let g = Globals {
        seed: cli.seed,
        tokenizer: cli.tokenizer.clone().unwrap_or_default(),
        tokenizer_flag: cli.tokenizer,
    };
    match dispatch(cli.command, &g) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// `Ok(false)` means the command ran but a validation it reports failed.
fn dispatch(cmd: Command, g: &Globals) -> Result<bool> {
    match cmd {
        Command::Dedup(a) => dedup(a, g),
        Command::Filter(a) => filter(a, g),
        Command::ClassifyTrain(a) => classify_train(a, g),
        Command::ClassifyApply(a) => classify_apply(a, g),
        Command::Mix(a) => mix(a, g),
        Command::Subsample(a) => subsample(a, g),
        Command::EvalCs(a) => eval_cs(a),
        Command::CheckIf(a) => check_if(a, g),
        Command::BuildNiah(a) => build_niah_cmd(a, g),
        Command::ScoreNiah(a) => score_niah_cmd(a, g),
        Command::BuildLongctx(a) => build_longctx(a, g),
        Command::KdLoss(a) => kd_loss_cmd(a),
        Command::Merge(a) => merge(a, g),
        Command::SafetyGen(a) => safety_gen(a, g),
        Command::Annotate(a) => annotate(a, g),
        Command::Stats(a) => stats(a, g),
        Command::Run(a) => run(a, g),
        Command::Explain(a) => explain(a, g),
    }
}

fn read_docs(paths: &[PathBuf]) -> Result<Vec<corpus::Document>> {
    corpus::read_all(paths).context("reading input shards")
}

fn dedup(a: DedupArgs, g: &Globals) -> Result<bool> {
    let mut cfg: DedupConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => DedupConfig::default(),
    };
    if let Some(v) = a.threshold {
        cfg.threshold = v;
    }
    if let Some(v) = a.num_perm {
        cfg.num_perm = v;
    }
    if let Some(b) = a.bands {
        cfg.bands = b;
        cfg.rows = cfg.num_perm / b.max(1);
    }
    if let Some(v) = a.ngram {
        cfg.ngram = v;
    }
    if let Some(u) = &a.unit {
        cfg.unit = serde_json::from_value::<ShingleUnit>(json!(u)).with_context(|| format!("unit {u:?}"))?;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let docs = read_docs(&a.inputs)?;
    let (report, kept) = dedup_corpus(docs, &cfg)?;
    log::info!("dedup: {} clusters, {} documents kept", report.clusters.len(), kept.len());
    let mut out = Outputs::new("dedup", &a.out, g, &a.inputs)?;
    out.shard("output.jsonl", &kept)?;
    out.json("report.json", &report)?;
    out.finish(json!({"config": cfg, "kept": kept.len()}))?;
    Ok(true)
}

fn filter(a: FilterArgs, g: &Globals) -> Result<bool> {
    let t: FilterThresholds = match &a.config {
        Some(p) => read_json(p)?,
        None => FilterThresholds::default(),
    };
    t.validate()?;
    let docs = read_docs(&a.inputs)?;
    let (kept, audit, summary) = filter_corpus(&docs, &t);
    let mut out = Outputs::new("filter", &a.out, g, &a.inputs)?;
    out.shard("output.jsonl", &kept)?;
    out.jsonl("audit.jsonl", &audit)?;
    out.json("report.json", &summary)?;
    out.finish(json!({"thresholds": t, "kept": kept.len()}))?;
    Ok(true)
}

fn classify_train(a: ClassifyTrainArgs, g: &Globals) -> Result<bool> {
    let mut hp: TrainParams = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainParams::default(),
    };
    if let Some(e) = a.epochs {
        hp.epochs = e;
    }
    if let Some(d) = a.dim {
        hp.dim = d;
    }
    if let Some(s) = g.seed {
        hp.seed = s;
    }
    let docs = read_docs(&a.inputs)?;
    let n = docs.len();
    let data: Vec<LabeledDoc> = docs.into_iter().filter_map(LabeledDoc::from_meta).collect();
    if data.len() < n {
        log::warn!("{} documents without a label were skipped", n - data.len());
    }
    let outcome = quality::train(&data, &hp)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    outcome.model.save(&a.out)?;
    let summary = json!({
        "params": hp,
        "classes": outcome.model.classes,
        "examples": data.len(),
        "final_loss": outcome.final_loss,
        "train_accuracy": outcome.train_accuracy,
    });
    io::file_manifest("classify-train", &a.out, g, &a.inputs, summary)?;
    println!("{}", serde_json::to_string_pretty(&json!({"train_accuracy": outcome.train_accuracy, "final_loss": outcome.final_loss}))?);
    Ok(true)
}

fn score_mode(score: Option<&str>, rule: &ThresholdRule) -> Result<ScoreMode> {
    let s = score.unwrap_or(if rule.scale == (0.0, 1.0) { "class:pos" } else { "expected" });
    if s == "expected" {
        return Ok(ScoreMode::ExpectedValue);
    }
    match s.strip_prefix("class:") {
        Some(l) => Ok(ScoreMode::ClassProb(l.to_string())),
        None => bail!("--score must be class:<label> or expected, got {s:?}"),
    }
}

fn parse_rule(s: &str) -> Result<ThresholdRule> {
    Ok(match s {
        "quality" => ThresholdRule::quality(),
        "culture" => ThresholdRule::culture(),
        "education" => ThresholdRule::education(),
        s => s.parse()?,
    })
}

fn classify_apply(a: ClassifyApplyArgs, g: &Globals) -> Result<bool> {
    let rule = parse_rule(&a.rule)?;
    let scorer = LinearScorer {
        mode: score_mode(a.score.as_deref(), &rule)?,
        model: NGramClassifier::load(&a.model)?,
    };
    let docs = read_docs(&a.inputs)?;
    let result = apply_threshold_stage(docs, &scorer, &rule);
    let mut out = Outputs::new("classify-apply", &a.out, g, &a.inputs)?;
    out.shard("output.jsonl", &result.kept)?;
    out.shard("dropped.jsonl", &result.dropped)?;
    out.jsonl("quarantine.jsonl", &result.quarantined)?;
    out.json("report.json", &result.report)?;
    out.finish(json!({"rule": rule.to_string(), "kept": result.kept.len()}))?;
    Ok(true)
}

fn mix(a: MixArgs, g: &Globals) -> Result<bool> {
    let mut spec = MixtureSpec::from_file(&a.spec)?;
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    let (docs, manifest) = compose(&spec)?;
    let check = validate_manifest(&manifest, &spec, a.tolerance);
    mixture::write_outputs(&a.out, &docs, &manifest)?;
    let mut out = Outputs::new("mix", &a.out, g, &[a.spec.clone()])?;
    out.existing("mix.jsonl")?;
    out.existing("mix.manifest.json")?;
    out.json("validation.json", &check)?;
    out.finish(json!({"entries": docs.len(), "validation_pass": check.pass}))?;
    if !check.pass {
        eprintln!("mixture validation failed: {:?}", check.failures);
    }
    Ok(check.pass)
}

fn subsample(a: SubsampleArgs, g: &Globals) -> Result<bool> {
    let docs = read_docs(&a.inputs)?;
    let kept = mixture::subsample(&docs, a.budget, &g.tokenizer, g.seed())?;
    let mut out = Outputs::new("subsample", &a.out, g, &a.inputs)?;
    out.shard("output.jsonl", &kept)?;
    out.finish(json!({"budget": a.budget, "kept": kept.len()}))?;
    Ok(true)
}

/// Responses come as JSONL of bare strings or objects with `response`.
fn read_responses(path: &Path) -> Result<Vec<String>> {
    read_jsonl::<serde_json::Value>(path)?
        .into_iter()
        .enumerate()
        .map(|(i, v)| match v {
            serde_json::Value::String(s) => Ok(s),
            serde_json::Value::Object(mut m) => match m.remove("response") {
                Some(serde_json::Value::String(s)) => Ok(s),
                _ => bail!("{}:{}: object without a string `response`", path.display(), i + 1),
            },
            _ => bail!("{}:{}: expected a string or an object", path.display(), i + 1),
        })
        .collect()
}

fn print_or_write<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn eval_cs(a: EvalCsArgs) -> Result<bool> {
    let responses = read_responses(&a.input)?;
    let report = code_switch_eval(&responses, a.tolerance);
    print_or_write(&report, a.out.as_deref())?;
    eprintln!("code-switching accuracy: {:.4}", report.accuracy);
    Ok(true)
}

fn check_if(a: CheckIfArgs, g: &Globals) -> Result<bool> {
    let samples: Vec<IfSample> = read_jsonl(&a.input)?;
    let outcomes = samples
        .iter()
        .map(|s| check_constraints(&s.response, &s.constraints))
        .collect::<Result<Vec<_>, _>>()?;
    let metrics = batch_metrics(&outcomes);
    let (accepted, rejected) = filter_rejected(samples)?;
    let mut out = Outputs::new("check-if", &a.out, g, &[a.input.clone()])?;
    out.json("metrics.json", &json!({"metrics": metrics, "average": metrics.average()}))?;
    out.jsonl("outcomes.jsonl", &outcomes)?;
    out.jsonl("accepted.jsonl", &accepted)?;
    out.jsonl("rejected.jsonl", &rejected)?;
    out.finish(json!({"accepted": accepted.len(), "rejected": rejected.len()}))?;
    Ok(true)
}

fn build_niah_cmd(a: BuildNiahArgs, g: &Globals) -> Result<bool> {
    let mut cfg = NiahConfig::classic(a.lengths, a.depths, g.seed());
    if let (Some(n), Some(q), Some(k)) = (a.needle, a.question, a.answer_key) {
        cfg.needle = n;
        cfg.question = q;
        cfg.answer_key = k;
    }
    cfg.tokenizer = g.tokenizer.clone();
    let haystack = read_docs(&a.haystack)?;
    let cases = build_niah(&haystack, &cfg)?;
    let docs: Vec<_> = cases.iter().map(NiahCase::to_document).collect();
    io::write_shard_file(&a.out, &docs)?;
    io::file_manifest("build-niah", &a.out, g, &a.haystack, json!({"config": cfg, "cases": cases.len()}))?;
    Ok(true)
}

fn score_niah_cmd(a: ScoreNiahArgs, g: &Globals) -> Result<bool> {
    let cases = read_docs(std::slice::from_ref(&a.cases))?
        .iter()
        .map(NiahCase::from_document)
        .collect::<Result<Vec<_>, _>>()?;
    let responses = read_responses(&a.responses)?;
    let grid = score_niah(&cases, &responses)?;
    let mut out = Outputs::new("score-niah", &a.out, g, &[a.cases.clone(), a.responses.clone()])?;
    out.json("grid.json", &grid)?;
    out.bytes("heatmap.txt", grid.heatmap().into_bytes())?;
    out.finish(json!({"cases": cases.len()}))?;
    print!("{}", grid.heatmap());
    Ok(true)
}

fn build_longctx(a: BuildLongctxArgs, g: &Globals) -> Result<bool> {
    let items: Vec<QaItem> = read_jsonl(&a.qa)?;
    let fillers = read_docs(&a.fillers)?;
    let records = build_longctx_qa(&items, &fillers, a.min_tokens, &g.tokenizer, g.seed())?;
    write_jsonl(&a.out, &records)?;
    let mut inputs = vec![a.qa.clone()];
    inputs.extend(a.fillers.iter().cloned());
    io::file_manifest("build-longctx", &a.out, g, &inputs, json!({"records": records.len(), "min_tokens": a.min_tokens}))?;
    Ok(true)
}

fn kd_loss_cmd(a: KdLossArgs) -> Result<bool> {
    let direction = match a.direction.as_str() {
        "student-teacher" => KlDirection::StudentTeacher,
        "teacher-student" => KlDirection::TeacherStudent,
        d => bail!("--direction must be student-teacher or teacher-student, got {d:?}"),
    };
    let params = KdParams {
        alpha: a.alpha,
        temperature: a.temperature,
        k: a.k,
        direction,
    };
    let records: Vec<TopKLogitRecord> = read_jsonl(&a.input)?;
    let report = kd_loss_batch(&records, &params)?;
    print_or_write(&report, a.out.as_deref())?;
    Ok(true)
}

fn merge(a: MergeArgs, g: &Globals) -> Result<bool> {
    if g.seed.is_some() {
        log::warn!("--seed is ignored by merge; the recipe's seed applies");
    }
    let outcome = merge_from_recipe(&a.recipe)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    outcome.merged.save(&a.out)?;
    io::file_manifest(
        "merge",
        &a.out,
        g,
        &[a.recipe.clone()],
        json!({"tensors": outcome.merged.tensors.len(), "zero_weight_tensors": outcome.zero_weight_tensors}),
    )?;
    Ok(true)
}

fn make_client(c: &ClientArgs) -> Result<Box<dyn AnnotationClient>> {
    match (&c.mock, &c.endpoint) {
        (Some(script), _) => Ok(Box::new(MockClient::from_file(script)?)),
        (None, Some(url)) => Ok(Box::new(HttpClient::new(
            url,
            &c.key_env,
            Duration::from_secs(c.timeout_secs),
        ))),
        (None, None) => bail!("either --mock <script> or --endpoint <url> is required"),
    }
}

fn make_annotator<'c>(client: &'c dyn AnnotationClient, c: &ClientArgs) -> Result<Annotator<'c>> {
    let config = AnnotatorConfig {
        model: c.model.clone(),
        retry: RetryPolicy {
            max_attempts: c.max_attempts,
            ..RetryPolicy::default()
        },
        ..AnnotatorConfig::default()
    };
    let templates = match &c.templates {
        Some(dir) => Templates::with_overrides(dir)?,
        None => Templates::builtin(),
    };
    Ok(Annotator::new(client, config).with_templates(templates))
}

fn safety_gen(a: SafetyGenArgs, g: &Globals) -> Result<bool> {
    let mut cfg: SafetyConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SafetyConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let topics = read_topics(&a.topics)?;
    let client = make_client(&a.client)?;
    let annotator = make_annotator(client.as_ref(), &a.client)?;
    let run = run_safety(&topics, &annotator, &cfg)?;
    write_safety_outputs(&a.out, &run)?;
    let mut out = Outputs::new("safety-gen", &a.out, g, &[a.topics.clone()])?;
    for f in ["train.jsonl", "test.jsonl", "stats.json", "errors.jsonl"] {
        out.existing(f)?;
    }
    out.jsonl("audit.jsonl", &annotator.audit())?;
    out.finish(json!({"config": cfg, "train": run.train.len(), "test": run.test.len(), "errors": run.errors.len()}))?;
    Ok(true)
}

fn annotate(a: AnnotateArgs, g: &Globals) -> Result<bool> {
    let docs = read_docs(&a.inputs)?;
    let client = make_client(&a.client)?;
    let annotator = make_annotator(client.as_ref(), &a.client)?;
    let outcome = annotate_corpus(&docs, &annotator, &a.rubric, (a.lo, a.hi))?;
    let labeled: Vec<_> = outcome.labeled.into_iter().map(LabeledDoc::into_doc).collect();
    let mut out = Outputs::new("annotate", &a.out, g, &a.inputs)?;
    out.shard("labeled.jsonl", &labeled)?;
    out.jsonl("quarantine.jsonl", &outcome.quarantined)?;
    let mut summary = json!({"labeled": labeled.len(), "quarantined": outcome.quarantined.len()});
    if let Some(f) = a.textbook_fraction {
        let (selected, _) = select_for_augmentation(docs, f, g.seed())?;
        let (rewritten, failed) = rewrite_as_textbook(&selected, &annotator);
        out.shard("textbook.jsonl", &rewritten)?;
        out.jsonl("textbook_failed.jsonl", &failed)?;
        summary["textbook"] = json!({"selected": selected.len(), "rewritten": rewritten.len()});
    }
    out.jsonl("audit.jsonl", &annotator.audit())?;
    out.finish(summary)?;
    Ok(true)
}

fn stats(a: StatsArgs, g: &Globals) -> Result<bool> {
    let docs = read_docs(&a.inputs)?;
    let mut by_lang: BTreeMap<Lang, (u64, u64)> = BTreeMap::new();
    let mut by_source: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    let mut chars = corpus::CharStats::default();
    for d in &docs {
        let t = corpus::count_tokens(&d.text, &g.tokenizer)? as u64;
        let e = by_lang.entry(d.lang).or_default();
        e.0 += 1;
        e.1 += t;
        let e = by_source.entry(d.source.clone()).or_default();
        e.0 += 1;
        e.1 += t;
        let s = corpus::char_stats(&d.text);
        chars.thai += s.thai;
        chars.latin += s.latin;
        chars.digit += s.digit;
        chars.punct += s.punct;
        chars.whitespace += s.whitespace;
        chars.other_letter += s.other_letter;
        chars.total += s.total;
    }
    let counts = |m: BTreeMap<_, (u64, u64)>| -> serde_json::Map<String, serde_json::Value> {
        m.into_iter()
            .map(|(k, (docs, tokens)): (String, _)| (k, json!({"docs": docs, "tokens": tokens})))
            .collect()
    };
    let mut report = json!({
        "documents": docs.len(),
        "tokenizer": g.tokenizer,
        "by_lang": counts(by_lang.into_iter().map(|(l, v)| (l.to_string(), v)).collect()),
        "by_source": counts(by_source),
        "chars": chars,
    });
    if a.safety {
        let samples = docs
            .iter()
            .map(|d| {
                let label: u8 = d
                    .meta
                    .get("label")
                    .and_then(|l| l.parse().ok())
                    .filter(|l| *l <= 1)
                    .with_context(|| format!("{}: missing or non-binary label", d.id))?;
                Ok(GeneratedSample {
                    id: d.id.clone(),
                    text: String::new(),
                    topic: d.meta.get("topic").cloned().unwrap_or_default(),
                    subtopic: d.meta.get("subtopic").cloned().unwrap_or_default(),
                    harm_score: d.meta.get("score").and_then(|s| s.parse().ok()).unwrap_or(0),
                    label,
                    lang: d.lang,
                    provenance: BTreeMap::new(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        report["safety"] = serde_json::to_value(dataset_stats(&samples))?;
    }
    print_or_write(&report, a.out.as_deref())?;
    Ok(true)
}

/// Global flags, when given, override the config's seed and tokenizer.
fn load_config(a: &ConfigArgs, g: &Globals) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(&a.config)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(t) = &g.tokenizer_flag {
        cfg.tokenizer = t.clone();
    }
    Ok(cfg)
}

fn run(a: ConfigArgs, g: &Globals) -> Result<bool> {
    let cfg = load_config(&a, g)?;
    let manifest = pipeline::run(&cfg)?;
    for s in &manifest.stages {
        eprintln!(
            "{:02}-{:<15} {:>8?} {:>7} -> {:<7} {} ms",
            s.index, s.stage, s.status, s.input_docs, s.output_docs, s.elapsed_ms
        );
    }
    if let Some(f) = &manifest.failed_stage {
        eprintln!("run failed at stage {f}");
    }
    Ok(manifest.success)
}

fn explain(a: ConfigArgs, g: &Globals) -> Result<bool> {
    let cfg = load_config(&a, g)?;
    let plan = pipeline::explain(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&plan)?);
    for w in &plan.warnings {
        eprintln!("warning: {w}");
    }
    Ok(true)
}

//! Config-driven sequential runs over the curation stages, with a manifest
//! recording checksums, counts and timings.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{self, Document, Lang, TokenizerSpec};
use crate::dedup::{dedup_corpus, DedupConfig};
use crate::hashing::{derive_seed, sha256_hex};
use crate::heuristics::{filter_corpus, FilterThresholds};
use crate::mixture::{self, compose_sources, validate_against, validate_ratios, SourceInput};
use crate::quality::{apply_threshold_stage, LinearScorer, NGramClassifier, ScoreMode, ThresholdRule};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const STAGE_NAMES: &[&str] = &["filter", "dedup", "classify-apply", "mix", "subsample"];
pub const MANIFEST_FILE: &str = "run.manifest.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {index} ({stage}): {message}")]
    InvalidStage { index: usize, stage: String, message: String },
    #[error("stage {index} ({stage}) failed: {message}")]
    StageFailed { index: usize, stage: String, message: String },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn tokenizer_field<'de, D: Deserializer<'de>>(d: D) -> Result<TokenizerSpec, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Field {
        Name(String),
        Spec(TokenizerSpec),
    }
    Ok(match Field::deserialize(d)? {
        Field::Name(n) => TokenizerSpec::new(n),
        Field::Spec(s) => s,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub stage: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub inputs: Vec<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, deserialize_with = "tokenizer_field")]
    pub tokenizer: TokenizerSpec,
    #[serde(default = "default_log_level")]
    pub log_level: String,
    #[serde(default)]
    pub stages: Vec<StageSpec>,
}

fn default_log_level() -> String {
    "info".into()
}

impl RunConfig {
    /// Parses JSON; relative paths resolve against the config's directory.
    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.inputs.iter_mut().for_each(resolve);
        resolve(&mut cfg.output_dir);
        for s in &mut cfg.stages {
            if s.stage == "classify-apply" {
                if let Some(Value::String(m)) = s.params.get_mut("model") {
                    let mut p = PathBuf::from(&*m);
                    resolve(&mut p);
                    *m = p.to_string_lossy().into_owned();
                }
            }
        }
        Ok(cfg)
    }

    pub fn checksum(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

fn default_rule() -> String {
    "quality:gt:0.5".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyParams {
    pub model: PathBuf,
    /// Threshold rule in `name:gt|ge:value[:lo..hi]` form.
    #[serde(default = "default_rule")]
    pub rule: String,
    /// `class:<label>` for a class probability, `expected` for the
    /// probability-weighted mean of numeric class labels.
    #[serde(default)]
    pub score: Option<String>,
}

impl ClassifyParams {
    fn mode(&self, rule: &ThresholdRule) -> Result<ScoreMode, String> {
        let s = match &self.score {
            Some(s) => s.as_str(),
            None if rule.scale == (0.0, 1.0) => "class:pos",
            None => "expected",
        };
        match s {
            "expected" => Ok(ScoreMode::ExpectedValue),
            s => s
                .strip_prefix("class:")
                .map(|l| ScoreMode::ClassProb(l.to_string()))
                .ok_or_else(|| format!("score must be class:<label> or expected, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixStageSource {
    pub name: String,
    pub lang: Lang,
    /// Documents whose `source` field equals this join the source; defaults
    /// to `name`.
    #[serde(default)]
    pub select_source: Option<String>,
    #[serde(default = "one")]
    pub repetition_factor: u32,
    #[serde(default)]
    pub token_budget: Option<u64>,
}

fn one() -> u32 {
    1
}

fn default_tolerance() -> f64 {
    0.005
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixParams {
    pub sources: Vec<MixStageSource>,
    #[serde(default)]
    pub target_lang_ratio: BTreeMap<Lang, f64>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsampleParams {
    pub token_budget: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "stage", content = "params", rename_all = "kebab-case")]
pub enum Stage {
    Filter(FilterThresholds),
    Dedup(DedupConfig),
    ClassifyApply(ClassifyParams),
    Mix(MixParams),
    Subsample(SubsampleParams),
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Filter(_) => "filter",
            Stage::Dedup(_) => "dedup",
            Stage::ClassifyApply(_) => "classify-apply",
            Stage::Mix(_) => "mix",
            Stage::Subsample(_) => "subsample",
        }
    }
}

fn params<T: serde::de::DeserializeOwned + Default>(v: &Value) -> Result<T, String> {
    if v.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(v.clone()).map_err(|e| e.to_string())
}

fn required<T: serde::de::DeserializeOwned>(v: &Value) -> Result<T, String> {
    if v.is_null() {
        return Err("params are required".into());
    }
    serde_json::from_value(v.clone()).map_err(|e| e.to_string())
}

/// Parses one stage and checks its params; the seed of seeded stages is
/// replaced by the run-derived sub-seed.
fn resolve_stage(spec: &StageSpec, seed: u64) -> Result<Stage, String> {
    match spec.stage.as_str() {
        "filter" => {
            let t: FilterThresholds = params(&spec.params)?;
            t.validate().map_err(|e| e.to_string())?;
            Ok(Stage::Filter(t))
        }
        "dedup" => {
            let mut c: DedupConfig = params(&spec.params)?;
            c.seed = seed;
            c.validate().map_err(|e| e.to_string())?;
            Ok(Stage::Dedup(c))
        }
        "classify-apply" => {
            let p: ClassifyParams = required(&spec.params)?;
            let rule: ThresholdRule = p.rule.parse().map_err(|e: crate::quality::QualityError| e.to_string())?;
            p.mode(&rule)?;
            if !p.model.is_file() {
                return Err(format!("model file {} not found", p.model.display()));
            }
            Ok(Stage::ClassifyApply(p))
        }
        "mix" => {
            let p: MixParams = required(&spec.params)?;
            if p.sources.is_empty() {
                return Err("mix needs at least one source".into());
            }
            let mut names = std::collections::HashSet::new();
            for s in &p.sources {
                if !names.insert(&s.name) {
                    return Err(format!("duplicate source {:?}", s.name));
                }
                if s.repetition_factor == 0 {
                    return Err(format!("source {:?}: repetition_factor must be >= 1", s.name));
                }
                if s.token_budget == Some(0) {
                    return Err(format!("source {:?}: token_budget must be > 0", s.name));
                }
            }
            validate_ratios(&p.target_lang_ratio).map_err(|e| e.to_string())?;
            if !(p.tolerance >= 0.0) {
                return Err("tolerance must be >= 0".into());
            }
            Ok(Stage::Mix(p))
        }
        "subsample" => {
            let p: SubsampleParams = required(&spec.params)?;
            if p.token_budget == 0 {
                return Err("token_budget must be > 0".into());
            }
            Ok(Stage::Subsample(p))
        }
        other => Err(format!("unknown stage {other:?}; expected one of {}", STAGE_NAMES.join(", "))),
    }
}

pub fn stage_seed(seed: u64, index: usize, name: &str) -> u64 {
    derive_seed(seed, &format!("stage.{index}.{name}"))
}

fn stage_dir(cfg: &RunConfig, index: usize, name: &str) -> PathBuf {
    cfg.output_dir.join(format!("{index:02}-{name}"))
}

/// Validates the whole config without touching the filesystem beyond
/// existence checks.
pub fn validate(cfg: &RunConfig) -> Result<Vec<Stage>, PipelineError> {
    cfg.tokenizer.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    if cfg.inputs.is_empty() {
        return Err(PipelineError::Config("no inputs".into()));
    }
    for p in &cfg.inputs {
        if !p.is_file() {
            return Err(PipelineError::Config(format!("input {} not found", p.display())));
        }
    }
    cfg.stages
        .iter()
        .enumerate()
        .map(|(i, s)| {
            resolve_stage(s, stage_seed(cfg.seed, i, &s.stage)).map_err(|message| PipelineError::InvalidStage {
                index: i,
                stage: s.stage.clone(),
                message,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStage {
    pub index: usize,
    pub stage: String,
    pub seed: u64,
    pub params: Value,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputEstimate {
    pub path: PathBuf,
    pub bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub seed: u64,
    pub tokenizer: TokenizerSpec,
    pub inputs: Vec<InputEstimate>,
    pub stages: Vec<PlanStage>,
    pub warnings: Vec<String>,
}

/// Dry run: resolves every default and reports what would execute.
pub fn explain(cfg: &RunConfig) -> Result<Plan, PipelineError> {
    let mut warnings = Vec::new();
    if cfg.stages.is_empty() {
        warnings.push("stage list is empty; run would only copy nothing".into());
    }
    let inputs = cfg
        .inputs
        .iter()
        .map(|p| {
            let bytes = fs::metadata(p).ok().map(|m| m.len());
            if bytes.is_none() {
                warnings.push(format!("input {} not found", p.display()));
            }
            InputEstimate { path: p.clone(), bytes }
        })
        .collect();
    let mut stages = Vec::new();
    for (i, s) in cfg.stages.iter().enumerate() {
        let seed = stage_seed(cfg.seed, i, &s.stage);
        let params = match resolve_stage(s, seed) {
            Ok(stage) => serde_json::to_value(&stage).expect("stage serializes")["params"].clone(),
            Err(e) => {
                warnings.push(format!("stage {i} ({}): {e}", s.stage));
                s.params.clone()
            }
        };
        stages.push(PlanStage {
            index: i,
            stage: s.stage.clone(),
            seed,
            params,
            output_dir: stage_dir(cfg, i, &s.stage),
        });
    }
    Ok(Plan {
        seed: cfg.seed,
        tokenizer: cfg.tokenizer.clone(),
        inputs,
        stages,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ok,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub index: usize,
    pub stage: String,
    pub seed: u64,
    pub status: StageStatus,
    pub input_docs: usize,
    pub output_docs: usize,
    pub elapsed_ms: u64,
    pub output_dir: PathBuf,
    /// File name → SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_checksum: String,
    pub seed: u64,
    pub tokenizer: TokenizerSpec,
    pub inputs: Vec<InputRecord>,
    pub input_docs: usize,
    pub stages: Vec<StageRecord>,
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
}

impl RunManifest {
    /// Copy with timings zeroed, for comparing runs.
    pub fn without_timings(&self) -> Self {
        let mut m = self.clone();
        m.stages.iter_mut().for_each(|s| s.elapsed_ms = 0);
        m
    }
}

struct StageResult {
    docs: Vec<Document>,
    /// Extra files beyond `output.jsonl`.
    files: Vec<(String, Vec<u8>)>,
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("report serializes");
    b.push(b'\n');
    b
}

fn jsonl_bytes<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut b = Vec::new();
    for it in items {
        b.extend(serde_json::to_vec(it).expect("record serializes"));
        b.push(b'\n');
    }
    b
}

fn execute(stage: &Stage, docs: Vec<Document>, cfg: &RunConfig, seed: u64) -> Result<StageResult, String> {
    match stage {
        Stage::Filter(t) => {
            let (kept, audit, summary) = filter_corpus(&docs, t);
            Ok(StageResult {
                docs: kept,
                files: vec![("audit.jsonl".into(), jsonl_bytes(&audit)), ("report.json".into(), json_bytes(&summary))],
            })
        }
        Stage::Dedup(c) => {
            let (report, kept) = dedup_corpus(docs, c).map_err(|e| e.to_string())?;
            Ok(StageResult {
                docs: kept,
                files: vec![("report.json".into(), json_bytes(&report))],
            })
        }
        Stage::ClassifyApply(p) => {
            let rule: ThresholdRule = p.rule.parse().map_err(|e: crate::quality::QualityError| e.to_string())?;
            let model = NGramClassifier::load(&p.model).map_err(|e| e.to_string())?;
            let scorer = LinearScorer {
                mode: p.mode(&rule)?,
                model,
            };
            let out = apply_threshold_stage(docs, &scorer, &rule);
            Ok(StageResult {
                docs: out.kept,
                files: vec![
                    ("dropped.jsonl".into(), corpus::shard_bytes(&out.dropped)),
                    ("quarantine.jsonl".into(), jsonl_bytes(&out.quarantined)),
                    ("report.json".into(), json_bytes(&out.report)),
                ],
            })
        }
        Stage::Mix(p) => {
            let mut pools: Vec<Vec<Document>> = vec![Vec::new(); p.sources.len()];
            let mut unmatched = 0usize;
            for d in docs {
                match p
                    .sources
                    .iter()
                    .position(|s| s.select_source.as_deref().unwrap_or(&s.name) == d.source)
                {
                    Some(i) => pools[i].push(d),
                    None => unmatched += 1,
                }
            }
            let inputs = p
                .sources
                .iter()
                .zip(pools)
                .map(|(s, docs)| SourceInput {
                    name: s.name.clone(),
                    lang: s.lang,
                    repetition_factor: s.repetition_factor,
                    token_budget: s.token_budget,
                    docs,
                })
                .collect();
            let (mixed, manifest) =
                compose_sources(inputs, &p.target_lang_ratio, &cfg.tokenizer, seed).map_err(|e| e.to_string())?;
            let factors = p.sources.iter().map(|s| (s.name.clone(), s.repetition_factor)).collect();
            let check = validate_against(&manifest, &factors, &p.target_lang_ratio, p.tolerance);
            let report = serde_json::json!({
                "manifest": manifest,
                "validation": check,
                "unmatched_docs": unmatched,
            });
            if !check.pass {
                return Err(format!("mixture validation failed: {:?}", check.failures));
            }
            Ok(StageResult {
                docs: mixed,
                files: vec![("report.json".into(), json_bytes(&report))],
            })
        }
        Stage::Subsample(p) => {
            let kept = mixture::subsample(&docs, p.token_budget, &cfg.tokenizer, seed).map_err(|e| e.to_string())?;
            Ok(StageResult { docs: kept, files: Vec::new() })
        }
    }
}

fn write_stage(dir: &Path, result: &StageResult) -> Result<BTreeMap<String, String>, PipelineError> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut sums = BTreeMap::new();
    let main = corpus::shard_bytes(&result.docs);
    let files = std::iter::once(("output.jsonl", &main)).chain(result.files.iter().map(|(n, b)| (n.as_str(), b)));
    for (name, bytes) in files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        sums.insert(name.to_string(), sha256_hex(bytes));
    }
    Ok(sums)
}

fn write_manifest(cfg: &RunConfig, m: &RunManifest) -> Result<(), PipelineError> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| io_err(&cfg.output_dir, e))?;
    let path = cfg.output_dir.join(MANIFEST_FILE);
    fs::write(&path, json_bytes(m)).map_err(|e| io_err(&path, e))
}

/// Validates, then executes stages in order. The manifest is written (to
/// `output_dir/run.manifest.json`) whether or not a stage fails; a failed
/// run returns the manifest inside `Ok` with `success == false`.
pub fn run(cfg: &RunConfig) -> Result<RunManifest, PipelineError> {
    let stages = validate(cfg)?;
    let mut inputs = Vec::new();
    let mut docs = Vec::new();
    for p in &cfg.inputs {
        let bytes = fs::read(p).map_err(|e| io_err(p, e))?;
        inputs.push(InputRecord {
            path: p.clone(),
            sha256: sha256_hex(&bytes),
        });
        for d in corpus::read_shard(p).map_err(|e| io_err(p, e))? {
            docs.push(d.map_err(|e| io_err(p, e))?);
        }
    }
    let mut manifest = RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        config_checksum: cfg.checksum(),
        seed: cfg.seed,
        tokenizer: cfg.tokenizer.clone(),
        inputs,
        input_docs: docs.len(),
        stages: Vec::new(),
        success: true,
        failed_stage: None,
    };
    let mut current = Some(docs);
    for (i, stage) in stages.iter().enumerate() {
        let name = stage.name();
        let seed = stage_seed(cfg.seed, i, name);
        let dir = stage_dir(cfg, i, name);
        let mut rec = StageRecord {
            index: i,
            stage: name.to_string(),
            seed,
            status: StageStatus::Skipped,
            input_docs: current.as_ref().map_or(0, Vec::len),
            output_docs: 0,
            elapsed_ms: 0,
            output_dir: dir.clone(),
            outputs: BTreeMap::new(),
            error: None,
        };
        if let Some(docs) = current.take() {
            log::info!("stage {i} ({name}): {} docs in", docs.len());
            let started = Instant::now();
            let outcome = execute(stage, docs, cfg, seed);
            rec.elapsed_ms = started.elapsed().as_millis() as u64;
            match outcome.map_err(|m| PipelineError::StageFailed {
                index: i,
                stage: name.to_string(),
                message: m,
            }) {
                Ok(result) => match write_stage(&dir, &result) {
                    Ok(sums) => {
                        rec.status = StageStatus::Ok;
                        rec.output_docs = result.docs.len();
                        rec.outputs = sums;
                        current = Some(result.docs);
                    }
                    Err(e) => {
                        rec.status = StageStatus::Failed;
                        rec.error = Some(e.to_string());
                    }
                },
                Err(e) => {
                    rec.status = StageStatus::Failed;
                    rec.error = Some(e.to_string());
                }
            }
            if rec.status == StageStatus::Failed {
                log::error!("stage {i} ({name}) failed: {}", rec.error.as_deref().unwrap_or(""));
                manifest.success = false;
                manifest.failed_stage = Some(format!("{i:02}-{name}"));
            }
        }
        manifest.stages.push(rec);
    }
    write_manifest(cfg, &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quality::{train, LabeledDoc, Provenance, TrainParams};

    fn prose(i: usize, lang: &str) -> String {
        let words = [
            "harbor", "lantern", "meadow", "copper", "willow", "ember", "quarry", "thistle", "orchard", "glacier",
            "ferry", "basalt", "saffron", "tundra", "pigeon", "marble", "canyon", "juniper", "falcon", "delta",
            "mosaic", "cobalt", "prairie", "walnut", "beacon", "lagoon", "timber", "pebble", "sorrel", "garnet",
        ];
        let mut out = Vec::new();
        for l in 0..6 {
            let line: Vec<&str> = (0..12)
                .map(|w| words[(crate::hashing::hash_str(&format!("{i}.{l}.{w}"), 3) % words.len() as u64) as usize])
                .collect();
            out.push(format!("{lang} {i} {}.", line.join(" ")));
        }
        out.join("\n")
    }

    fn fixture(dir: &Path, n: usize) -> PathBuf {
        let mut docs: Vec<Document> = (0..n)
            .map(|i| {
                let (lang, src) = if i % 2 == 0 { (Lang::En, "web-en") } else { (Lang::Th, "web-th") };
                Document::new(format!("doc{i:04}"), &prose(i, src), src, lang)
            })
            .collect();
        // Exact duplicates and junk.
        docs.push(Document::new("dup0", &docs[0].text.clone(), "web-en", Lang::En));
        docs.push(Document::new("junk", "12345 !!!! 6789", "web-en", Lang::En));
        let path = dir.join("input.jsonl");
        corpus::write_shard(&docs, &path).unwrap();
        path
    }

    fn config(dir: &Path, stages: Value) -> RunConfig {
        let inputs = vec![fixture(dir, 100)];
        RunConfig {
            inputs,
            output_dir: dir.join("out"),
            seed: 7,
            tokenizer: TokenizerSpec::whitespace(),
            log_level: "info".into(),
            stages: serde_json::from_value(stages).unwrap(),
        }
    }

    #[test]
    fn filter_dedup_mix_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(
            dir.path(),
            serde_json::json!([
                {"stage": "filter"},
                {"stage": "dedup"},
                {"stage": "mix", "params": {"sources": [
                    {"name": "web-en", "lang": "en"},
                    {"name": "web-th", "lang": "th", "repetition_factor": 2}
                ]}}
            ]),
        );
        let m = run(&cfg).unwrap();
        assert!(m.success, "{m:?}");
        assert_eq!(m.stages.len(), 3);
        assert!(m.stages[0].output_docs <= m.input_docs);
        assert!(m.stages[1].output_docs <= m.stages[0].output_docs);
        assert_eq!(m.stages[0].output_docs, 101);
        assert_eq!(m.stages[1].output_docs, 100);
        assert_eq!(m.stages[2].output_docs, 150);
        let on_disk: RunManifest = serde_json::from_slice(&fs::read(cfg.output_dir.join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(on_disk, m);
        let again = run(&cfg).unwrap();
        assert_eq!(again.without_timings(), m.without_timings());
    }

    #[test]
    fn unknown_stage_rejected_before_execution() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), serde_json::json!([{"stage": "filter"}, {"stage": "tokenize"}]));
        let err = run(&cfg).unwrap_err();
        assert!(matches!(err, PipelineError::InvalidStage { index: 1, .. }));
        assert!(!cfg.output_dir.exists());
        let cfg = config(dir.path(), serde_json::json!([{"stage": "dedup", "params": {"bands": 7}}]));
        assert!(matches!(run(&cfg), Err(PipelineError::InvalidStage { index: 0, .. })));
    }

    #[test]
    fn failing_stage_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(
            dir.path(),
            serde_json::json!([
                {"stage": "filter"},
                {"stage": "mix", "params": {"sources": [{"name": "web-en", "lang": "en"}], "target_lang_ratio": {"th": 1.0}}},
                {"stage": "subsample", "params": {"token_budget": 100}}
            ]),
        );
        let m = run(&cfg).unwrap();
        assert!(!m.success);
        assert_eq!(m.failed_stage.as_deref(), Some("01-mix"));
        assert_eq!(m.stages[1].status, StageStatus::Failed);
        assert_eq!(m.stages[2].status, StageStatus::Skipped);
        assert!(cfg.output_dir.join(MANIFEST_FILE).exists());
    }

    #[test]
    fn classify_apply_with_trained_model() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<LabeledDoc> = (0..40)
            .map(|i| {
                let (text, label) = if i % 2 == 0 { (prose(i, "web-en"), "pos") } else { ("buy now cheap cheap click here".to_string(), "neg") };
                LabeledDoc::new(Document::new(format!("t{i}"), &text, "x", Lang::En), label, Provenance::Human)
            })
            .collect();
        let model = train(&data, &TrainParams { dim: 1 << 14, ..TrainParams::default() }).unwrap().model;
        model.save(&dir.path().join("q.bin")).unwrap();
        let cfg = config(
            dir.path(),
            serde_json::json!([{"stage": "classify-apply", "params": {"model": dir.path().join("q.bin")}}]),
        );
        let m = run(&cfg).unwrap();
        assert!(m.success);
        assert!(m.stages[0].outputs.contains_key("quarantine.jsonl"));
    }

    #[test]
    fn explain_resolves_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), serde_json::json!([{"stage": "dedup"}, {"stage": "filter", "params": {"min_doc_chars": 50}}]));
        let plan = explain(&cfg).unwrap();
        assert_eq!(plan.stages[0].params["threshold"], 0.7);
        assert_eq!(plan.stages[0].params["seed"], plan.stages[0].seed);
        assert_eq!(plan.stages[1].params["min_doc_chars"], 50);
        assert_eq!(plan.stages[1].params["max_digit_ratio"], 0.3);
        assert!(plan.warnings.is_empty());
        assert!(!cfg.output_dir.exists());
        let empty = config(dir.path(), serde_json::json!([]));
        let plan = explain(&empty).unwrap();
        assert!(plan.stages.is_empty());
        assert_eq!(plan.warnings.len(), 1);
    }

    #[test]
    fn config_file_paths_and_tokenizer_forms() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), 3);
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"inputs":["input.jsonl"],"output_dir":"out","tokenizer":"whitespace","stages":[]}"#).unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.inputs[0], dir.path().join("input.jsonl"));
        assert_eq!(cfg.tokenizer, TokenizerSpec::whitespace());
        fs::write(&path, r#"{"inputs":[],"output_dir":"o","tokenizer":{"name":"char","version":"2"}}"#).unwrap();
        assert_eq!(RunConfig::from_file(&path).unwrap().tokenizer.version, "2");
        fs::write(&path, r#"{"inputs":[],"output_dir":"o","bogus":1}"#).unwrap();
        assert!(RunConfig::from_file(&path).is_err());
    }
}

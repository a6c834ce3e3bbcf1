//! Declarative data mixtures: repetition factors, token-budget subsampling,
//! language-ratio targets and an auditable manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, count_tokens, CorpusError, Document, Lang, TokenizerSpec};
use crate::hashing::{derive_seed, sha256_hex};

#[derive(Debug, Error)]
pub enum MixtureError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("source {0:?}: repetition_factor must be >= 1")]
    ZeroFactor(String),
    #[error("source {0:?}: token_budget must be > 0")]
    ZeroBudget(String),
    #[error("target language ratios must be in [0,1] and sum to 1, got {0:?}")]
    BadRatios(BTreeMap<Lang, f64>),
    #[error("ratio target infeasible: {0}")]
    Infeasible(String),
    #[error("duplicate source name {0:?}")]
    DuplicateSource(String),
    #[error("spec: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSource {
    pub name: String,
    #[serde(default)]
    pub shards: Vec<PathBuf>,
    pub lang: Lang,
    #[serde(default = "one")]
    pub repetition_factor: u32,
    #[serde(default)]
    pub token_budget: Option<u64>,
    /// Externally learned mixture weight, recorded but not applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_override: Option<f64>,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub sources: Vec<MixtureSource>,
    #[serde(default)]
    pub target_lang_ratio: BTreeMap<Lang, f64>,
    #[serde(default)]
    pub tokenizer: TokenizerSpec,
    #[serde(default)]
    pub seed: u64,
}

impl MixtureSpec {
    pub fn from_file(path: &Path) -> Result<Self, MixtureError> {
        let text = std::fs::read_to_string(path).map_err(|e| CorpusError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut spec: MixtureSpec = serde_json::from_str(&text).map_err(|e| MixtureError::Spec(e.to_string()))?;
        // Relative shard paths resolve against the spec's directory.
        if let Some(base) = path.parent() {
            for s in &mut spec.sources {
                for shard in &mut s.shards {
                    if shard.is_relative() {
                        *shard = base.join(&*shard);
                    }
                }
            }
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), MixtureError> {
        let mut names = std::collections::HashSet::new();
        for s in &self.sources {
            if !names.insert(&s.name) {
                return Err(MixtureError::DuplicateSource(s.name.clone()));
            }
            if s.repetition_factor == 0 {
                return Err(MixtureError::ZeroFactor(s.name.clone()));
            }
            if s.token_budget == Some(0) {
                return Err(MixtureError::ZeroBudget(s.name.clone()));
            }
        }
        validate_ratios(&self.target_lang_ratio)?;
        self.tokenizer.validate()?;
        Ok(())
    }
}

pub fn validate_ratios(r: &BTreeMap<Lang, f64>) -> Result<(), MixtureError> {
    if r.is_empty() {
        return Ok(());
    }
    let sum: f64 = r.values().sum();
    if r.values().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > 1e-9 {
        return Err(MixtureError::BadRatios(r.clone()));
    }
    Ok(())
}

/// A loaded source ready for composition.
#[derive(Debug, Clone)]
pub struct SourceInput {
    pub name: String,
    pub lang: Lang,
    pub repetition_factor: u32,
    pub token_budget: Option<u64>,
    pub docs: Vec<Document>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceManifest {
    pub name: String,
    pub lang: Lang,
    pub input_docs: usize,
    pub input_tokens: u64,
    pub repetition_factor: u32,
    /// `input_docs * repetition_factor`, before any budget truncation.
    pub repeated_entries: usize,
    pub token_budget: Option<u64>,
    pub emitted_entries: usize,
    pub emitted_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixManifest {
    pub sources: Vec<SourceManifest>,
    pub target_lang_ratio: BTreeMap<Lang, f64>,
    /// Share of emitted tokens per document language.
    pub realized_lang_ratio: BTreeMap<Lang, f64>,
    pub total_entries: usize,
    pub total_tokens: u64,
    pub seed: u64,
    pub tokenizer: TokenizerSpec,
    /// SHA-256 of the emitted shard bytes.
    pub checksum: String,
}

/// Greedy seeded sample under a token budget.
///
/// Documents are visited in a seeded uniform order; each one is taken if it
/// still fits. The result keeps the input order.
pub fn subsample(docs: &[Document], token_budget: u64, tokenizer: &TokenizerSpec, seed: u64) -> Result<Vec<Document>, MixtureError> {
    if token_budget == 0 {
        return Err(MixtureError::ZeroBudget("subsample".to_string()));
    }
    let counts: Vec<u64> = docs
        .iter()
        .map(|d| count_tokens(&d.text, tokenizer).map(|n| n as u64))
        .collect::<Result<_, _>>()?;
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut used = 0u64;
    let mut take = vec![false; docs.len()];
    for i in order {
        if used + counts[i] <= token_budget {
            used += counts[i];
            take[i] = true;
        }
    }
    Ok(docs
        .iter()
        .zip(take)
        .filter(|(_, t)| *t)
        .map(|(d, _)| d.clone())
        .collect())
}

fn repeat_id(id: &str, k: u32) -> String {
    if k == 0 {
        id.to_string()
    } else {
        format!("{id}#rep{k}")
    }
}

/// Emits every source `repetition_factor` times (then budget-subsamples the
/// repeated pool), shuffles all entries with one seeded permutation and audits
/// the result.
pub fn compose_sources(
    inputs: Vec<SourceInput>,
    target_lang_ratio: &BTreeMap<Lang, f64>,
    tokenizer: &TokenizerSpec,
    seed: u64,
) -> Result<(Vec<Document>, MixManifest), MixtureError> {
    validate_ratios(target_lang_ratio)?;
    let mut emitted = Vec::new();
    let mut sources = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for src in inputs {
        if !seen.insert(src.name.clone()) {
            return Err(MixtureError::DuplicateSource(src.name));
        }
        if src.repetition_factor == 0 {
            return Err(MixtureError::ZeroFactor(src.name));
        }
        let input_tokens: u64 = src
            .docs
            .iter()
            .map(|d| count_tokens(&d.text, tokenizer).map(|n| n as u64))
            .sum::<Result<u64, _>>()?;
        let mut pool = Vec::with_capacity(src.docs.len() * src.repetition_factor as usize);
        for k in 0..src.repetition_factor {
            for d in &src.docs {
                let mut copy = d.clone();
                copy.id = repeat_id(&d.id, k);
                copy.meta.insert("mix.source".to_string(), src.name.clone());
                copy.meta.insert("mix.repeat".to_string(), k.to_string());
                pool.push(copy);
            }
        }
        let repeated_entries = pool.len();
        if let Some(budget) = src.token_budget {
            pool = subsample(&pool, budget, tokenizer, derive_seed(seed, &format!("mix.budget.{}", src.name)))?;
        }
        let mut emitted_tokens = 0;
        for d in &mut pool {
            emitted_tokens += d.count_with(tokenizer)?;
        }
        sources.push(SourceManifest {
            name: src.name,
            lang: src.lang,
            input_docs: src.docs.len(),
            input_tokens,
            repetition_factor: src.repetition_factor,
            repeated_entries,
            token_budget: src.token_budget,
            emitted_entries: pool.len(),
            emitted_tokens,
        });
        emitted.extend(pool);
    }

    emitted.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "mix.shuffle")));

    let total_tokens: u64 = emitted.iter().map(|d| d.token_count.unwrap_or(0)).sum();
    let mut by_lang: BTreeMap<Lang, u64> = BTreeMap::new();
    for d in &emitted {
        *by_lang.entry(d.lang).or_default() += d.token_count.unwrap_or(0);
    }
    let realized_lang_ratio: BTreeMap<Lang, f64> = by_lang
        .iter()
        .map(|(l, t)| (*l, *t as f64 / total_tokens.max(1) as f64))
        .collect();
    for (lang, target) in target_lang_ratio {
        if *target > 0.0 && by_lang.get(lang).copied().unwrap_or(0) == 0 {
            return Err(MixtureError::Infeasible(format!(
                "target {lang}={target} but no {lang} tokens are available"
            )));
        }
    }

    let mut ids = std::collections::HashSet::new();
    for d in &emitted {
        if !ids.insert(d.id.as_str()) {
            return Err(CorpusError::DuplicateId(d.id.clone()).into());
        }
    }

    let manifest = MixManifest {
        sources,
        target_lang_ratio: target_lang_ratio.clone(),
        realized_lang_ratio,
        total_entries: emitted.len(),
        total_tokens,
        seed,
        tokenizer: tokenizer.clone(),
        checksum: sha256_hex(&corpus::shard_bytes(&emitted)),
    };
    Ok((emitted, manifest))
}

/// Loads every source's shards and composes the mixture.
pub fn compose(spec: &MixtureSpec) -> Result<(Vec<Document>, MixManifest), MixtureError> {
    spec.validate()?;
    let inputs = spec
        .sources
        .iter()
        .map(|s| {
            Ok(SourceInput {
                name: s.name.clone(),
                lang: s.lang,
                repetition_factor: s.repetition_factor,
                token_budget: s.token_budget,
                docs: corpus::read_all(&s.shards)?,
            })
        })
        .collect::<Result<Vec<_>, MixtureError>>()?;
    compose_sources(inputs, &spec.target_lang_ratio, &spec.tokenizer, spec.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub pass: bool,
    /// Source names or language tags that failed, with the reason.
    pub failures: Vec<(String, String)>,
}

/// Checks realized ratios against targets within `tolerance` and repetition
/// bookkeeping against the declared factors.
pub fn validate_against(
    manifest: &MixManifest,
    factors: &BTreeMap<String, u32>,
    target: &BTreeMap<Lang, f64>,
    tolerance: f64,
) -> ValidationReport {
    let mut failures = Vec::new();
    for s in &manifest.sources {
        let declared = factors.get(&s.name).copied();
        if let Some(f) = declared {
            if f != s.repetition_factor {
                failures.push((s.name.clone(), format!("declared factor {f}, manifest records {}", s.repetition_factor)));
            }
        }
        let f = declared.unwrap_or(s.repetition_factor) as usize;
        if s.repeated_entries != s.input_docs * f {
            failures.push((s.name.clone(), format!("repeated {} entries, expected {} x {f}", s.repeated_entries, s.input_docs)));
        } else if s.token_budget.is_none() && s.emitted_entries != s.input_docs * f {
            failures.push((s.name.clone(), format!("emitted {} entries, expected {} x {f}", s.emitted_entries, s.input_docs)));
        }
    }
    for name in factors.keys() {
        if !manifest.sources.iter().any(|s| &s.name == name) {
            failures.push((name.clone(), "declared source missing from manifest".to_string()));
        }
    }
    for (lang, t) in target {
        let r = manifest.realized_lang_ratio.get(lang).copied().unwrap_or(0.0);
        if (r - t).abs() > tolerance {
            failures.push((lang.to_string(), format!("realized {r:.6} vs target {t} (tolerance {tolerance})")));
        }
    }
    ValidationReport {
        pass: failures.is_empty(),
        failures,
    }
}

pub fn validate_manifest(manifest: &MixManifest, spec: &MixtureSpec, tolerance: f64) -> ValidationReport {
    let factors = spec
        .sources
        .iter()
        .map(|s| (s.name.clone(), s.repetition_factor))
        .collect();
    validate_against(manifest, &factors, &spec.target_lang_ratio, tolerance)
}

/// Writes `mix.jsonl` and `mix.manifest.json` under `out_dir`.
pub fn write_outputs(out_dir: &Path, docs: &[Document], manifest: &MixManifest) -> Result<(), MixtureError> {
    std::fs::create_dir_all(out_dir).map_err(|e| CorpusError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    corpus::write_shard(docs, out_dir.join("mix.jsonl"))?;
    let path = out_dir.join("mix.manifest.json");
    std::fs::write(&path, serde_json::to_vec_pretty(manifest).expect("manifest serializes"))
        .map_err(|e| CorpusError::Io { path, source: e })?;
    Ok(())
}

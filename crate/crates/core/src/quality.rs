//! Linear hashed n-gram classifier and score-threshold filtering stages.
//!
//! Features are fastText-style: hashed word 1..N grams plus character n-grams
//! of each boundary-marked word, L2-normalized. The model is multinomial
//! logistic regression trained by seeded SGD.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;
use crate::dedup::normalize_for_shingling;
use crate::hashing::hash_str;

#[derive(Debug, Error)]
pub enum QualityError {
    #[error("training data is empty")]
    EmptyData,
    #[error("training data needs at least two classes, found {0:?}")]
    SingleClass(Vec<String>),
    #[error("training diverged: non-finite loss at epoch {0}")]
    Divergent(usize),
    #[error("feature dimension must be >= 1")]
    ZeroDim,
    #[error("label {0:?} is not a model class")]
    UnknownLabel(String),
    #[error("invalid threshold rule {0:?}: {1}")]
    Rule(String, String),
    #[error("model file: {0}")]
    ModelFormat(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("inspection hook failed: {0}")]
    Hook(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NGramConfig {
    pub word_max: usize,
    pub char_min: usize,
    pub char_max: usize,
}

impl Default for NGramConfig {
    fn default() -> Self {
        NGramConfig {
            word_max: 2,
            char_min: 3,
            char_max: 5,
        }
    }
}

/// Sparse vector with strictly increasing indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVec {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseVec {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn get(&self, index: u32) -> f64 {
        self.indices
            .binary_search(&index)
            .map(|i| self.values[i])
            .unwrap_or(0.0)
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Every n-gram string the featurizer hashes, prefixed by kind.
pub fn ngrams(text: &str, cfg: &NGramConfig) -> Vec<String> {
    let norm = normalize_for_shingling(text);
    if norm.is_empty() {
        return Vec::new();
    }
    let words: Vec<&str> = norm.split(' ').collect();
    let mut grams = Vec::new();
    for n in 1..=cfg.word_max {
        for w in words.windows(n) {
            grams.push(format!("w{n}:{}", w.join(" ")));
        }
    }
    for word in &words {
        let marked: Vec<char> = std::iter::once('<')
            .chain(word.chars())
            .chain(std::iter::once('>'))
            .collect();
        for n in cfg.char_min..=cfg.char_max {
            if n == 0 || n > marked.len() {
                continue;
            }
            for w in marked.windows(n) {
                grams.push(format!("c:{}", w.iter().collect::<String>()));
            }
        }
    }
    grams
}

/// Hashed n-gram counts before normalization.
pub fn featurize_counts(text: &str, cfg: &NGramConfig, dim: usize, seed: u64) -> SparseVec {
    let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
    for g in ngrams(text, cfg) {
        *counts.entry((hash_str(&g, seed) % dim as u64) as u32).or_default() += 1.0;
    }
    SparseVec {
        indices: counts.keys().copied().collect(),
        values: counts.values().copied().collect(),
    }
}

/// Hashed n-gram counts scaled to unit L2 norm; the empty text maps to the zero vector.
pub fn featurize(text: &str, cfg: &NGramConfig, dim: usize, seed: u64) -> SparseVec {
    let mut v = featurize_counts(text, cfg, dim, seed);
    let norm = v.norm();
    if norm > 0.0 {
        v.values.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    #[default]
    Human,
    LlmAnnotated,
    SeedPositive,
    SeedNegative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDoc {
    pub doc: Document,
    pub label: String,
    pub provenance: Provenance,
}

impl LabeledDoc {
    pub fn new(doc: Document, label: impl Into<String>, provenance: Provenance) -> Self {
        LabeledDoc {
            doc,
            label: label.into(),
            provenance,
        }
    }

    /// Reads `label` (and optional `provenance`) from document metadata.
    pub fn from_meta(doc: Document) -> Option<Self> {
        let label = doc.meta.get("label")?.clone();
        let provenance = doc
            .meta
            .get("provenance")
            .and_then(|p| serde_json::from_value(serde_json::Value::String(p.clone())).ok())
            .unwrap_or_default();
        Some(LabeledDoc { doc, label, provenance })
    }

    /// Inverse of [`LabeledDoc::from_meta`].
    pub fn into_doc(self) -> Document {
        let prov = serde_json::to_value(self.provenance).expect("enum serializes");
        self.doc
            .with_meta("label", self.label)
            .with_meta("provenance", prov.as_str().unwrap_or_default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub lr: f64,
    pub epochs: usize,
    pub dim: usize,
    pub seed: u64,
    pub l2: f64,
    pub ngram: NGramConfig,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            lr: 0.5,
            epochs: 10,
            dim: 1 << 20,
            seed: 0,
            l2: 0.0,
            ngram: NGramConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramClassifier {
    pub classes: Vec<String>,
    pub dim: usize,
    pub ngram: NGramConfig,
    pub hash_seed: u64,
    /// Row-major `dim x classes`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: NGramClassifier,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

impl NGramClassifier {
    pub fn zeros(classes: Vec<String>, dim: usize, ngram: NGramConfig, hash_seed: u64) -> Self {
        let c = classes.len();
        NGramClassifier {
            classes,
            dim,
            ngram,
            hash_seed,
            weights: vec![0.0; dim * c],
            bias: vec![0.0; c],
        }
    }

    pub fn featurize(&self, text: &str) -> SparseVec {
        featurize(text, &self.ngram, self.dim, self.hash_seed)
    }

    fn scores(&self, x: &SparseVec) -> Vec<f64> {
        let c = self.classes.len();
        let mut s = self.bias.clone();
        for (&i, &v) in x.indices.iter().zip(&x.values) {
            let row = &self.weights[i as usize * c..(i as usize + 1) * c];
            for (sk, w) in s.iter_mut().zip(row) {
                *sk += v * w;
            }
        }
        s
    }

    pub fn predict_features(&self, x: &SparseVec) -> Vec<f64> {
        let mut s = self.scores(x);
        softmax_in_place(&mut s);
        s
    }

    pub fn predict(&self, text: &str) -> Prediction {
        Prediction {
            classes: self.classes.clone(),
            probs: self.predict_features(&self.featurize(text)),
        }
    }

    pub fn class_index(&self, label: &str) -> Result<usize, QualityError> {
        self.classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| QualityError::UnknownLabel(label.to_string()))
    }

    /// Multiplies every weight and bias by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut m = self.clone();
        m.weights.iter_mut().for_each(|w| *w *= c);
        m.bias.iter_mut().for_each(|b| *b *= c);
        m
    }

    const MAGIC: &'static [u8; 8] = b"NGCLSv1\0";

    /// Versioned binary dump: magic, JSON header, biases, then nonzero weight rows.
    pub fn to_bytes(&self) -> Vec<u8> {
        #[derive(Serialize)]
        struct Header<'a> {
            classes: &'a [String],
            dim: usize,
            ngram: NGramConfig,
            hash_seed: u64,
        }
        let header = serde_json::to_vec(&Header {
            classes: &self.classes,
            dim: self.dim,
            ngram: self.ngram,
            hash_seed: self.hash_seed,
        })
        .expect("header serializes");
        let c = self.classes.len();
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for b in &self.bias {
            out.extend_from_slice(&b.to_le_bytes());
        }
        let rows: Vec<usize> = (0..self.dim)
            .filter(|&i| self.weights[i * c..(i + 1) * c].iter().any(|&w| w != 0.0))
            .collect();
        out.extend_from_slice(&(rows.len() as u64).to_le_bytes());
        for i in rows {
            out.extend_from_slice(&(i as u32).to_le_bytes());
            for w in &self.weights[i * c..(i + 1) * c] {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, QualityError> {
        #[derive(Deserialize)]
        struct Header {
            classes: Vec<String>,
            dim: usize,
            ngram: NGramConfig,
            hash_seed: u64,
        }
        let bad = |m: &str| QualityError::ModelFormat(m.to_string());
        let mut cur = ByteCursor(bytes);
        if cur.take(8)? != Self::MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = cur.u32()? as usize;
        let header: Header = serde_json::from_slice(cur.take(hlen)?).map_err(|e| bad(&e.to_string()))?;
        if header.dim == 0 {
            return Err(QualityError::ZeroDim);
        }
        let mut model = NGramClassifier::zeros(header.classes, header.dim, header.ngram, header.hash_seed);
        let c = model.classes.len();
        for k in 0..c {
            model.bias[k] = cur.f64()?;
        }
        let rows = cur.u64()?;
        for _ in 0..rows {
            let i = cur.u32()? as usize;
            if i >= model.dim {
                return Err(bad("row index out of range"));
            }
            for k in 0..c {
                model.weights[i * c + k] = cur.f64()?;
            }
        }
        if !cur.0.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), QualityError> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, QualityError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

struct ByteCursor<'a>(&'a [u8]);

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], QualityError> {
        if self.0.len() < n {
            return Err(QualityError::ModelFormat("truncated".to_string()));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, QualityError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, QualityError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, QualityError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub classes: Vec<String>,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn prob(&self, label: &str) -> Option<f64> {
        self.classes.iter().position(|c| c == label).map(|i| self.probs[i])
    }

    pub fn argmax(&self) -> &str {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        &self.classes[best]
    }

    /// `Σ value(class)·p(class)` for numerically named classes.
    pub fn expected_value(&self) -> Option<f64> {
        let mut acc = 0.0;
        for (c, p) in self.classes.iter().zip(&self.probs) {
            acc += c.parse::<f64>().ok()? * p;
        }
        Some(acc)
    }
}

/// Sorted class list; ordinal labels sort numerically.
fn class_list(data: &[LabeledDoc]) -> Vec<String> {
    let mut classes: Vec<String> = data
        .iter()
        .map(|d| d.label.clone())
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    classes.sort_by(|a, b| match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y),
        _ => a.cmp(b),
    });
    classes
}

pub fn train(data: &[LabeledDoc], hp: &TrainParams) -> Result<TrainOutcome, QualityError> {
    if data.is_empty() {
        return Err(QualityError::EmptyData);
    }
    if hp.dim == 0 {
        return Err(QualityError::ZeroDim);
    }
    let classes = class_list(data);
    if classes.len() < 2 {
        return Err(QualityError::SingleClass(classes));
    }
    let mut model = NGramClassifier::zeros(classes, hp.dim, hp.ngram, hp.seed);
    let c = model.classes.len();
    let feats: Vec<SparseVec> = data.par_iter().map(|d| model.featurize(&d.doc.text)).collect();
    let labels: Vec<usize> = data
        .iter()
        .map(|d| model.class_index(&d.label))
        .collect::<Result<_, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; c];
    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        for &n in &order {
            let x = &feats[n];
            let p = model.predict_features(x);
            for k in 0..c {
                grad[k] = p[k] - if k == labels[n] { 1.0 } else { 0.0 };
            }
            for (&i, &v) in x.indices.iter().zip(&x.values) {
                let row = &mut model.weights[i as usize * c..(i as usize + 1) * c];
                for k in 0..c {
                    row[k] -= hp.lr * (v * grad[k] + hp.l2 * row[k]);
                }
            }
            for k in 0..c {
                model.bias[k] -= hp.lr * grad[k];
            }
        }
        if model.bias.iter().any(|b| !b.is_finite()) || !mean_loss(&model, &feats, &labels).is_finite() {
            return Err(QualityError::Divergent(epoch));
        }
    }
    let final_loss = mean_loss(&model, &feats, &labels);
    if !final_loss.is_finite() {
        return Err(QualityError::Divergent(hp.epochs));
    }
    let correct = feats
        .iter()
        .zip(&labels)
        .filter(|(x, &y)| argmax(&model.predict_features(x)) == y)
        .count();
    Ok(TrainOutcome {
        train_accuracy: correct as f64 / data.len() as f64,
        model,
        final_loss,
    })
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

fn mean_loss(model: &NGramClassifier, feats: &[SparseVec], labels: &[usize]) -> f64 {
    let total: f64 = feats
        .iter()
        .zip(labels)
        .map(|(x, &y)| {
            let q = model.predict_features(x)[y];
            if q.is_nan() {
                f64::NAN
            } else {
                -q.max(f64::MIN_POSITIVE).ln()
            }
        })
        .sum();
    total / feats.len() as f64
}

pub fn predict(model: &NGramClassifier, text: &str) -> Prediction {
    model.predict(text)
}

/// Accuracy of `model` against labeled documents.
pub fn accuracy(model: &NGramClassifier, data: &[LabeledDoc]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = data
        .iter()
        .filter(|d| model.predict(&d.doc.text).argmax() == d.label)
        .count();
    hits as f64 / data.len() as f64
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{0}")]
pub struct ScoreError(pub String);

/// Anything that maps a document to a numeric score.
pub trait Scorer: Sync {
    fn score(&self, doc: &Document) -> Result<f64, ScoreError>;
}

impl<F> Scorer for F
where
    F: Fn(&Document) -> Result<f64, ScoreError> + Sync,
{
    fn score(&self, doc: &Document) -> Result<f64, ScoreError> {
        self(doc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "label")]
pub enum ScoreMode {
    /// Probability of one class (binary quality filters).
    ClassProb(String),
    /// Probability-weighted mean of numeric class names (1..5 ordinal scales).
    ExpectedValue,
}

pub struct LinearScorer {
    pub model: NGramClassifier,
    pub mode: ScoreMode,
}

impl Scorer for LinearScorer {
    fn score(&self, doc: &Document) -> Result<f64, ScoreError> {
        let p = self.model.predict(&doc.text);
        match &self.mode {
            ScoreMode::ClassProb(label) => p
                .prob(label)
                .ok_or_else(|| ScoreError(format!("model has no class {label:?}"))),
            ScoreMode::ExpectedValue => p
                .expected_value()
                .ok_or_else(|| ScoreError("model classes are not numeric".to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = "gt")]
    Greater,
    #[serde(rename = "ge")]
    GreaterOrEqual,
}

impl Comparison {
    pub fn holds(self, score: f64, min_keep: f64) -> bool {
        match self {
            Comparison::Greater => score > min_keep,
            Comparison::GreaterOrEqual => score >= min_keep,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRule {
    pub name: String,
    pub scale: (f64, f64),
    pub min_keep: f64,
    pub comparison: Comparison,
}

impl ThresholdRule {
    pub fn new(name: &str, scale: (f64, f64), comparison: Comparison, min_keep: f64) -> Result<Self, QualityError> {
        let rule = ThresholdRule {
            name: name.to_string(),
            scale,
            min_keep,
            comparison,
        };
        rule.validate()?;
        Ok(rule)
    }

    /// Positive-class probability strictly above 0.5.
    pub fn quality() -> Self {
        Self::new("quality", (0.0, 1.0), Comparison::Greater, 0.5).unwrap()
    }

    /// 1..5 cultural-relevance score of 4 or more.
    pub fn culture() -> Self {
        Self::new("culture", (1.0, 5.0), Comparison::GreaterOrEqual, 4.0).unwrap()
    }

    /// 1..5 educational-value score of 3 or more.
    pub fn education() -> Self {
        Self::new("education", (1.0, 5.0), Comparison::GreaterOrEqual, 3.0).unwrap()
    }

    pub fn validate(&self) -> Result<(), QualityError> {
        let (lo, hi) = self.scale;
        if !(lo <= hi) || !(lo..=hi).contains(&self.min_keep) {
            return Err(QualityError::Rule(
                self.to_string(),
                format!("min_keep {} outside scale [{lo}, {hi}]", self.min_keep),
            ));
        }
        Ok(())
    }

    pub fn in_scale(&self, score: f64) -> bool {
        score.is_finite() && score >= self.scale.0 && score <= self.scale.1
    }
}

impl fmt::Display for ThresholdRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cmp = match self.comparison {
            Comparison::Greater => "gt",
            Comparison::GreaterOrEqual => "ge",
        };
        write!(f, "{}:{}:{}:{}..{}", self.name, cmp, self.min_keep, self.scale.0, self.scale.1)
    }
}

/// Parses `name:gt|ge:value[:lo..hi]`. Known names carry default scales
/// (`quality` 0..1, `culture` and `education` 1..5); custom names need one.
impl FromStr for ThresholdRule {
    type Err = QualityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |m: &str| QualityError::Rule(s.to_string(), m.to_string());
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() < 3 || parts.len() > 4 {
            return Err(err("expected name:gt|ge:value[:lo..hi]"));
        }
        let comparison = match parts[1] {
            "gt" | ">" => Comparison::Greater,
            "ge" | ">=" => Comparison::GreaterOrEqual,
            _ => return Err(err("comparison must be gt or ge")),
        };
        let min_keep: f64 = parts[2].parse().map_err(|_| err("threshold is not a number"))?;
        let scale = match parts.get(3) {
            Some(range) => {
                let (lo, hi) = range.split_once("..").ok_or_else(|| err("scale must be lo..hi"))?;
                (
                    lo.parse().map_err(|_| err("bad scale bound"))?,
                    hi.parse().map_err(|_| err("bad scale bound"))?,
                )
            }
            None => match parts[0] {
                "quality" => (0.0, 1.0),
                "culture" | "education" => (1.0, 5.0),
                _ => return Err(err("custom rules need an explicit scale")),
            },
        };
        ThresholdRule::new(parts[0], scale, comparison, min_keep)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quarantined {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub rule: ThresholdRule,
    pub input: usize,
    pub kept: usize,
    pub dropped: usize,
    pub quarantined: usize,
    /// Ten equal-width bins over the rule's scale.
    pub histogram: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub kept: Vec<Document>,
    pub dropped: Vec<Document>,
    pub quarantined: Vec<Quarantined>,
    pub report: StageReport,
}

const HIST_BINS: usize = 10;

/// Scores documents and keeps those passing `rule`. Each kept or dropped
/// document gets its score under `meta["score.<rule name>"]`. Scorer failures
/// and out-of-scale scores go to quarantine.
pub fn apply_threshold_stage(docs: Vec<Document>, scorer: &dyn Scorer, rule: &ThresholdRule) -> StageOutcome {
    let scores: Vec<Result<f64, ScoreError>> = docs.par_iter().map(|d| scorer.score(d)).collect();
    let mut out = StageOutcome {
        kept: Vec::new(),
        dropped: Vec::new(),
        quarantined: Vec::new(),
        report: StageReport {
            rule: rule.clone(),
            input: docs.len(),
            kept: 0,
            dropped: 0,
            quarantined: 0,
            histogram: vec![0; HIST_BINS],
        },
    };
    let (lo, hi) = rule.scale;
    for (doc, score) in docs.into_iter().zip(scores) {
        let score = match score {
            Ok(s) if rule.in_scale(s) => s,
            Ok(s) => {
                out.quarantined.push(Quarantined {
                    id: doc.id,
                    reason: format!("score {s} outside scale [{lo}, {hi}]"),
                });
                continue;
            }
            Err(e) => {
                out.quarantined.push(Quarantined {
                    id: doc.id,
                    reason: e.0,
                });
                continue;
            }
        };
        let bin = if hi > lo {
            (((score - lo) / (hi - lo)) * HIST_BINS as f64).floor() as usize
        } else {
            0
        };
        out.report.histogram[bin.min(HIST_BINS - 1)] += 1;
        let doc = doc.with_meta(format!("score.{}", rule.name), format!("{score}"));
        if rule.comparison.holds(score, rule.min_keep) {
            out.kept.push(doc);
        } else {
            out.dropped.push(doc);
        }
    }
    out.report.kept = out.kept.len();
    out.report.dropped = out.dropped.len();
    out.report.quarantined = out.quarantined.len();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub positive: String,
    pub negative: String,
    pub top_fraction: f64,
    pub bottom_fraction: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            positive: "pos".to_string(),
            negative: "neg".to_string(),
            top_fraction: 0.1,
            bottom_fraction: 0.1,
        }
    }
}

/// A document proposed for relabeling, with its model score and the label its band implies.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub doc: Document,
    pub score: f64,
    pub proposed_label: String,
}

/// Human or LLM review of bootstrap candidates. Returns the accepted labels.
pub trait InspectHook {
    fn inspect(&mut self, candidates: &[Candidate]) -> Result<Vec<LabeledDoc>, QualityError>;
}

/// Accepts every proposed label as-is.
pub struct AcceptAll;

impl InspectHook for AcceptAll {
    fn inspect(&mut self, candidates: &[Candidate]) -> Result<Vec<LabeledDoc>, QualityError> {
        Ok(candidates
            .iter()
            .map(|c| LabeledDoc::new(c.doc.clone(), c.proposed_label.clone(), Provenance::Human))
            .collect())
    }
}

/// Top and bottom score bands of `corpus` under the positive-class probability.
/// Band sizes are `floor(fraction * n)`; ties break by input order.
pub fn bootstrap_candidates(
    corpus: &[Document],
    model: &NGramClassifier,
    cfg: &BootstrapConfig,
) -> Result<Vec<Candidate>, QualityError> {
    let pos = model.class_index(&cfg.positive)?;
    model.class_index(&cfg.negative)?;
    let scores: Vec<f64> = corpus
        .par_iter()
        .map(|d| model.predict(&d.text).probs[pos])
        .collect();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let n = corpus.len();
    let top = ((cfg.top_fraction * n as f64) + 1e-9).floor() as usize;
    let bottom = (((cfg.bottom_fraction * n as f64) + 1e-9).floor() as usize).min(n - top.min(n));
    let top = top.min(n);
    let mut out = Vec::with_capacity(top + bottom);
    for &i in &order[..top] {
        out.push(Candidate {
            doc: corpus[i].clone(),
            score: scores[i],
            proposed_label: cfg.positive.clone(),
        });
    }
    for &i in &order[n - bottom..] {
        out.push(Candidate {
            doc: corpus[i].clone(),
            score: scores[i],
            proposed_label: cfg.negative.clone(),
        });
    }
    Ok(out)
}

/// One refinement round: score the corpus, send the extreme bands through
/// `hook`, and merge accepted labels into a copy of `labeled`. A label from
/// the hook replaces an existing entry with the same document id. On hook
/// failure the error is returned and `labeled` is untouched.
pub fn iterate_bootstrap(
    labeled: &[LabeledDoc],
    corpus: &[Document],
    model: &NGramClassifier,
    hook: &mut dyn InspectHook,
    cfg: &BootstrapConfig,
) -> Result<Vec<LabeledDoc>, QualityError> {
    let candidates = bootstrap_candidates(corpus, model, cfg)?;
    let accepted = hook.inspect(&candidates)?;
    let mut merged: Vec<LabeledDoc> = labeled.to_vec();
    for new in accepted {
        match merged.iter_mut().find(|l| l.doc.id == new.doc.id) {
            Some(slot) => *slot = new,
            None => merged.push(new),
        }
    }
    Ok(merged)
}

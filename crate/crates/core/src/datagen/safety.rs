//! Six-step safety dataset construction: topics → subtopics → texts →
//! harm scores → binary labels → EN→TH translation, then a stratified
//! train/test split.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{parse_score, Annotator, DatagenError};
use crate::corpus::{write_shard, Document, Lang};
use crate::hashing::derive_seed;

pub const DEFAULT_HARM_THRESHOLD: u8 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSample {
    pub id: String,
    pub text: String,
    pub topic: String,
    pub subtopic: String,
    pub harm_score: u8,
    pub label: u8,
    pub lang: Lang,
    pub provenance: BTreeMap<String, String>,
}

impl GeneratedSample {
    pub fn to_document(&self) -> Document {
        let mut d = Document::new(&self.id, &self.text, "safety-gen", self.lang)
            .with_meta("label", self.label.to_string())
            .with_meta("score", self.harm_score.to_string())
            .with_meta("topic", &self.topic)
            .with_meta("subtopic", &self.subtopic);
        for (k, v) in &self.provenance {
            d = d.with_meta(format!("provenance.{k}"), v);
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub step: String,
    pub request_id: String,
    pub subject: String,
    pub message: String,
}

/// Strips list markers (`-`, `*`, `•`, `1.`, `2)`) and surrounding quotes.
fn clean_line(line: &str) -> &str {
    let mut s = line.trim();
    s = s.trim_start_matches(['-', '*', '•']).trim_start();
    let digits = s.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 && s[digits..].starts_with(['.', ')']) {
        s = s[digits + 1..].trim_start();
    }
    s.trim_matches(['"', '\'']).trim()
}

pub fn generate_subtopics(topic: &str, annotator: &Annotator, request_id: &str) -> Result<Vec<String>, DatagenError> {
    let wrap = |e| DatagenError::Subtopics {
        topic: topic.to_string(),
        source: Box::new(e),
    };
    let reply = annotator.call("subtopics", request_id, &[("topic", topic)]).map_err(wrap)?;
    let mut seen = std::collections::HashSet::new();
    let out: Vec<String> = reply
        .lines()
        .map(clean_line)
        .filter(|l| !l.is_empty() && seen.insert(l.to_lowercase()))
        .map(str::to_string)
        .collect();
    if out.is_empty() {
        return Err(wrap(DatagenError::EmptyOutput(request_id.to_string())));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedText {
    pub index: usize,
    pub text: String,
    pub request_id: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TextBatch {
    pub texts: Vec<GeneratedText>,
    pub errors: Vec<ErrorRecord>,
}

/// `n` passages about one subtopic. Request ids run `text-{first_seq}`
/// upward; individual failures become error records.
pub fn generate_texts(
    topic: &str,
    subtopic: &str,
    annotator: &Annotator,
    n: usize,
    first_seq: usize,
) -> Result<TextBatch, DatagenError> {
    if n == 0 {
        return Err(DatagenError::Invalid("n must be at least 1".into()));
    }
    let results: Vec<(usize, String, Result<String, DatagenError>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let rid = format!("text-{:05}", first_seq + i);
            let (idx, total) = ((i + 1).to_string(), n.to_string());
            let r = annotator.call(
                "text",
                &rid,
                &[("topic", topic), ("subtopic", subtopic), ("index", &idx), ("n", &total)],
            );
            (i, rid, r)
        })
        .collect();
    let mut batch = TextBatch::default();
    for (index, request_id, r) in results {
        match r.and_then(|t| {
            let t = t.trim().to_string();
            if t.is_empty() {
                Err(DatagenError::EmptyOutput(request_id.clone()))
            } else {
                Ok(t)
            }
        }) {
            Ok(text) => batch.texts.push(GeneratedText { index, text, request_id }),
            Err(e) => batch.errors.push(ErrorRecord {
                step: "text".into(),
                request_id,
                subject: subtopic.to_string(),
                message: e.to_string(),
            }),
        }
    }
    Ok(batch)
}

pub fn score_harm(text: &str, annotator: &Annotator, request_id: &str) -> Result<u8, DatagenError> {
    let reply = annotator.call("harm", request_id, &[("text", text)])?;
    Ok(parse_score(&reply, 1, 10)? as u8)
}

/// 1 iff `score` is strictly above `threshold`.
pub fn binary_label(score: i64, threshold: u8) -> Result<u8, DatagenError> {
    if !(1..=10).contains(&score) {
        return Err(DatagenError::ScoreRange(score));
    }
    Ok(u8::from(score > threshold as i64))
}

/// Indices (ascending) of the ⌊n/(en_per_th+1)⌋ samples chosen for
/// translation, so `en_per_th` English samples remain per Thai one.
pub fn translation_plan(n: usize, en_per_th: usize, seed: u64) -> Vec<usize> {
    let k = n / (en_per_th + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "safety.translate"));
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// ⌊fraction·n⌋ of each (topic, lang) stratum go to test; order within each
/// output follows the input.
pub fn split_test_set(
    samples: &[GeneratedSample],
    fraction: f64,
    seed: u64,
) -> (Vec<GeneratedSample>, Vec<GeneratedSample>) {
    let mut strata: BTreeMap<(&str, Lang), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        strata.entry((&s.topic, s.lang)).or_default().push(i);
    }
    let mut in_test = vec![false; samples.len()];
    for ((topic, lang), mut idx) in strata {
        let k = (fraction * idx.len() as f64 + 1e-9).floor() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("safety.split.{topic}.{lang}")));
        idx.shuffle(&mut rng);
        for &i in &idx[..k.min(idx.len())] {
            in_test[i] = true;
        }
    }
    let (test, train): (Vec<_>, Vec<_>) = samples.iter().cloned().zip(in_test).partition(|(_, t)| *t);
    (
        train.into_iter().map(|(s, _)| s).collect(),
        test.into_iter().map(|(s, _)| s).collect(),
    )
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub harmful: u64,
    pub unharmful: u64,
}

impl LabelCounts {
    fn add(&mut self, label: u8) {
        if label == 1 {
            self.harmful += 1;
        } else {
            self.unharmful += 1;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SafetyDatasetStats {
    pub total: u64,
    pub counts: LabelCounts,
    pub per_topic: BTreeMap<String, BTreeMap<Lang, LabelCounts>>,
    /// Harmful share; absent for an empty dataset.
    pub balance: Option<f64>,
}

pub fn dataset_stats<'a>(samples: impl IntoIterator<Item = &'a GeneratedSample>) -> SafetyDatasetStats {
    let mut st = SafetyDatasetStats::default();
    for s in samples {
        st.total += 1;
        st.counts.add(s.label);
        st.per_topic.entry(s.topic.clone()).or_default().entry(s.lang).or_default().add(s.label);
    }
    st.balance = (st.total > 0).then(|| st.counts.harmful as f64 / st.total as f64);
    st
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetyConfig {
    pub texts_per_subtopic: usize,
    pub max_subtopics: Option<usize>,
    pub harm_threshold: u8,
    pub en_per_th: usize,
    pub test_fraction: f64,
    pub seed: u64,
    /// Requests in flight at once.
    pub concurrency: usize,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        SafetyConfig {
            texts_per_subtopic: 3,
            max_subtopics: None,
            harm_threshold: DEFAULT_HARM_THRESHOLD,
            en_per_th: 4,
            test_fraction: 0.2,
            seed: 0,
            concurrency: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafetyRun {
    pub train: Vec<GeneratedSample>,
    pub test: Vec<GeneratedSample>,
    pub stats: SafetyDatasetStats,
    pub errors: Vec<ErrorRecord>,
}

fn slug(s: &str) -> String {
    let out: String = s
        .chars()
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    out.split('-').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("-")
}

/// Topics file: a JSON array of strings, or one topic per line (`#` starts
/// a comment line).
pub fn read_topics(path: &Path) -> Result<Vec<String>, DatagenError> {
    let text = fs::read_to_string(path).map_err(|e| DatagenError::Io(format!("{}: {e}", path.display())))?;
    if let Ok(v) = serde_json::from_str::<Vec<String>>(&text) {
        return Ok(v);
    }
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

pub fn run_safety(topics: &[String], annotator: &Annotator, cfg: &SafetyConfig) -> Result<SafetyRun, DatagenError> {
    if topics.is_empty() {
        return Err(DatagenError::Invalid("no topics".into()));
    }
    if cfg.texts_per_subtopic == 0 {
        return Err(DatagenError::Invalid("texts_per_subtopic must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(DatagenError::Invalid(format!("test_fraction {} not in [0, 1)", cfg.test_fraction)));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.concurrency.max(1))
        .build()
        .map_err(|e| DatagenError::Invalid(e.to_string()))?;
    pool.install(|| run_steps(topics, annotator, cfg))
}

fn run_steps(topics: &[String], annotator: &Annotator, cfg: &SafetyConfig) -> Result<SafetyRun, DatagenError> {
    let mut errors = Vec::new();

    let subtopics: Vec<Vec<String>> = topics
        .par_iter()
        .enumerate()
        .map(|(i, t)| generate_subtopics(t, annotator, &format!("subtopics-{i:05}")))
        .collect::<Result<_, _>>()?;
    let mut jobs: Vec<(usize, &str, String)> = Vec::new();
    for (ti, subs) in subtopics.into_iter().enumerate() {
        let take = cfg.max_subtopics.unwrap_or(usize::MAX);
        for s in subs.into_iter().take(take) {
            jobs.push((ti, &topics[ti], s));
        }
    }

    let n = cfg.texts_per_subtopic;
    let batches: Vec<TextBatch> = jobs
        .par_iter()
        .enumerate()
        .map(|(j, (_, topic, sub))| generate_texts(topic, sub, annotator, n, j * n))
        .collect::<Result<_, _>>()?;
    let mut drafts = Vec::new();
    for ((ti, topic, sub), batch) in jobs.iter().zip(batches) {
        errors.extend(batch.errors);
        for t in batch.texts {
            drafts.push((format!("{}-{:03}-{:02}", slug(topic), drafts.len(), t.index), *ti, topic, sub, t));
        }
    }

    let scored: Vec<(usize, Result<u8, DatagenError>)> = drafts
        .par_iter()
        .enumerate()
        .map(|(k, d)| (k, score_harm(&d.4.text, annotator, &format!("harm-{k:05}"))))
        .collect();
    let mut samples = Vec::new();
    for (k, r) in scored {
        let (id, _, topic, sub, t) = &drafts[k];
        match r {
            Ok(score) => {
                let mut provenance = BTreeMap::new();
                provenance.insert("text_request".to_string(), t.request_id.clone());
                provenance.insert("text_template".to_string(), annotator.templates.id("text"));
                provenance.insert("harm_request".to_string(), format!("harm-{k:05}"));
                provenance.insert("harm_template".to_string(), annotator.templates.id("harm"));
                samples.push(GeneratedSample {
                    id: id.clone(),
                    text: t.text.clone(),
                    topic: topic.to_string(),
                    subtopic: sub.to_string(),
                    harm_score: score,
                    label: binary_label(score as i64, cfg.harm_threshold)?,
                    lang: Lang::En,
                    provenance,
                });
            }
            Err(e) => errors.push(ErrorRecord {
                step: "harm".into(),
                request_id: format!("harm-{k:05}"),
                subject: id.clone(),
                message: e.to_string(),
            }),
        }
    }

    let plan = translation_plan(samples.len(), cfg.en_per_th, cfg.seed);
    let translated: Vec<(usize, Result<String, DatagenError>)> = plan
        .par_iter()
        .enumerate()
        .map(|(q, &i)| (i, annotator.call("translate", &format!("translate-{q:05}"), &[("text", &samples[i].text)])))
        .collect();
    for (q, (i, r)) in translated.into_iter().enumerate() {
        let rid = format!("translate-{q:05}");
        match r.map(|t| t.trim().to_string()) {
            Ok(t) if !t.is_empty() => {
                let s = &mut samples[i];
                s.provenance.insert("translated_from".into(), s.id.clone());
                s.provenance.insert("translate_request".into(), rid);
                s.provenance.insert("translate_template".into(), annotator.templates.id("translate"));
                s.id = format!("{}-th", s.id);
                s.text = t;
                s.lang = Lang::Th;
            }
            Ok(_) => errors.push(ErrorRecord {
                step: "translate".into(),
                subject: samples[i].id.clone(),
                message: DatagenError::EmptyOutput(rid.clone()).to_string(),
                request_id: rid,
            }),
            Err(e) => errors.push(ErrorRecord {
                step: "translate".into(),
                request_id: rid,
                subject: samples[i].id.clone(),
                message: e.to_string(),
            }),
        }
    }

    let stats = dataset_stats(&samples);
    let (train, test) = split_test_set(&samples, cfg.test_fraction, cfg.seed);
    Ok(SafetyRun {
        train,
        test,
        stats,
        errors,
    })
}

/// `train.jsonl`, `test.jsonl`, `stats.json`, `errors.jsonl`; all
/// deterministic for a fixed client and seed.
pub fn write_safety_outputs(dir: &Path, run: &SafetyRun) -> Result<(), DatagenError> {
    let io = |e: &dyn std::fmt::Display| DatagenError::Io(e.to_string());
    fs::create_dir_all(dir).map_err(|e| io(&e))?;
    let train: Vec<Document> = run.train.iter().map(GeneratedSample::to_document).collect();
    let test: Vec<Document> = run.test.iter().map(GeneratedSample::to_document).collect();
    write_shard(&train, dir.join("train.jsonl")).map_err(|e| io(&e))?;
    write_shard(&test, dir.join("test.jsonl")).map_err(|e| io(&e))?;
    let stats = serde_json::to_string_pretty(&run.stats).map_err(|e| io(&e))?;
    fs::write(dir.join("stats.json"), stats + "\n").map_err(|e| io(&e))?;
    let mut errs = String::new();
    for e in &run.errors {
        errs.push_str(&serde_json::to_string(e).map_err(|e| io(&e))?);
        errs.push('\n');
    }
    fs::write(dir.join("errors.jsonl"), errs).map_err(|e| io(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{AnnotatorConfig, MockClient, RetryPolicy};

    fn annotator(client: &MockClient) -> Annotator<'_> {
        Annotator::new(
            client,
            AnnotatorConfig {
                retry: RetryPolicy::no_wait(3),
                ..AnnotatorConfig::default()
            },
        )
    }

    fn mock(extra: &str) -> MockClient {
        MockClient::from_json(&format!(
            r#"{{"rules":[{extra}
                {{"match":"narrower, concrete subtopics","reply":"- monarchy\n- monarchy\n1. temple conduct\n\nfestivals"}},
                {{"match":"Take the role of an author","reply":"Passage: {{prompt}}"}},
                {{"match":"harm rating","score":[1,10]}},
                {{"match":"fluent Thai","reply":"แปลแล้ว {{input}}"}}
            ]}}"#
        ))
        .unwrap()
    }

    #[test]
    fn subtopics_cleaned_and_deduplicated() {
        let m = mock("");
        let a = annotator(&m);
        assert_eq!(
            generate_subtopics("royal institution", &a, "subtopics-00000").unwrap(),
            vec!["monarchy", "temple conduct", "festivals"]
        );
    }

    #[test]
    fn subtopic_timeouts_name_the_topic() {
        let m = mock(r#"{"match":"gambling","error":"timeout"},"#);
        let a = annotator(&m);
        let err = generate_subtopics("gambling", &a, "subtopics-00000").unwrap_err();
        assert!(matches!(&err, DatagenError::Subtopics { topic, source }
            if topic == "gambling" && matches!(**source, DatagenError::Exhausted { attempts: 3, .. })));
        assert_eq!(m.calls(), 3);
        let empty = MockClient::from_json(r#"{"rules":[{"match":"","reply":"  \n"}]}"#).unwrap();
        assert!(generate_subtopics("x", &annotator(&empty), "s").is_err());
    }

    #[test]
    fn texts_echo_subtopic_and_report_partial_failure() {
        let m = mock(r#"{"match":"passage 2 of 3","error":"refused"},"#);
        let a = annotator(&m);
        let b = generate_texts("religion", "temple conduct", &a, 3, 0).unwrap();
        assert_eq!(b.texts.len(), 2);
        assert_eq!(b.errors.len(), 1);
        assert_eq!(b.errors[0].request_id, "text-00001");
        assert!(b.texts.iter().all(|t| t.text.contains("temple conduct")));
        assert!(matches!(generate_texts("t", "s", &a, 0, 0), Err(DatagenError::Invalid(_))));
    }

    #[test]
    fn harm_scores_parse_strictly() {
        for (reply, want) in [("7", Some(7)), ("score: 3/10", Some(3)), ("harmless", None)] {
            let m = MockClient::from_json(&format!(r#"{{"rules":[{{"match":"","reply":"{reply}"}}]}}"#)).unwrap();
            let got = score_harm("text", &annotator(&m), "harm-0").ok();
            assert_eq!(got, want, "{reply}");
        }
    }

    #[test]
    fn labels_exhaustive() {
        for s in 1..=10 {
            assert_eq!(binary_label(s, 5).unwrap(), u8::from(s > 5));
        }
        assert!(binary_label(0, 5).is_err());
        assert!(binary_label(11, 5).is_err());
    }

    #[test]
    fn translation_plan_counts() {
        assert_eq!(translation_plan(100, 4, 1).len(), 20);
        assert!(translation_plan(4, 4, 1).len() <= 1);
        assert_eq!(translation_plan(100, 4, 9), translation_plan(100, 4, 9));
        assert_ne!(translation_plan(100, 4, 9), translation_plan(100, 4, 10));
    }

    fn sample(topic: &str, i: usize, lang: Lang, label: u8) -> GeneratedSample {
        GeneratedSample {
            id: format!("{topic}-{i}-{lang}"),
            text: String::new(),
            topic: topic.into(),
            subtopic: String::new(),
            harm_score: if label == 1 { 8 } else { 2 },
            label,
            lang,
            provenance: BTreeMap::new(),
        }
    }

    #[test]
    fn split_is_stratified_partition() {
        let mut all = Vec::new();
        for i in 0..10 {
            all.push(sample("a", i, Lang::En, 0));
        }
        all.push(sample("b", 0, Lang::Th, 1));
        for i in 0..7 {
            all.push(sample("a", i, Lang::Th, 1));
        }
        let (train, test) = split_test_set(&all, 0.2, 3);
        assert_eq!(train.len() + test.len(), all.len());
        let count = |v: &[GeneratedSample], t: &str, l: Lang| v.iter().filter(|s| s.topic == t && s.lang == l).count();
        assert_eq!(count(&test, "a", Lang::En), 2);
        assert_eq!(count(&test, "b", Lang::Th), 0);
        assert_eq!(count(&test, "a", Lang::Th), 1);
        let mut ids: Vec<_> = train.iter().chain(&test).map(|s| s.id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), all.len());
    }

    #[test]
    fn stats_balance() {
        assert_eq!(dataset_stats(&[]).balance, None);
        let zeros: Vec<_> = (0..4).map(|i| sample("a", i, Lang::En, 0)).collect();
        assert_eq!(dataset_stats(&zeros).balance, Some(0.0));
        let mixed = [sample("a", 0, Lang::En, 1), sample("a", 1, Lang::Th, 0)];
        let st = dataset_stats(&mixed);
        assert_eq!(st.per_topic["a"][&Lang::Th].unharmful, 1);
        assert_eq!(st.balance, Some(0.5));
    }

    #[test]
    fn pipeline_is_deterministic() {
        let topics = vec!["royal institution".to_string(), "gambling".to_string()];
        let cfg = SafetyConfig {
            texts_per_subtopic: 5,
            seed: 11,
            ..SafetyConfig::default()
        };
        let run = |dir: &Path| {
            let m = mock("");
            let r = run_safety(&topics, &annotator(&m), &cfg).unwrap();
            write_safety_outputs(dir, &r).unwrap();
            r
        };
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let r1 = run(d1.path());
        run(d2.path());
        for f in ["train.jsonl", "test.jsonl", "stats.json", "errors.jsonl"] {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap(), "{f}");
        }
        assert_eq!(r1.stats.total, 30);
        let th = r1.train.iter().chain(&r1.test).filter(|s| s.lang == Lang::Th).count();
        assert_eq!(th, 6);
        assert!(r1.train.iter().chain(&r1.test).all(|s| s.label == u8::from(s.harm_score > 5)));
    }
}

//! Needle-in-a-haystack case generation and grid scoring.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::split_sentences;
use crate::corpus::{classify_char, count_tokens, CharClass, CorpusError, Document, Lang, TokenizerSpec};
use crate::hashing::derive_seed;

#[derive(Debug, Error)]
pub enum NiahError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("haystack has {available} tokens, need {needed}")]
    InsufficientHaystack { available: usize, needed: usize },
    #[error("needle occurs in haystack document {0:?}")]
    NeedleCollision(String),
    #[error("depth {0} outside [0, 100]")]
    BadDepth(f64),
    #[error("target length {target} too small for a {needle}-token needle")]
    TooShort { target: usize, needle: usize },
    #[error("could not reach {target} tokens within 2% (got {got})")]
    LengthMiss { target: usize, got: usize },
    #[error("{cases} cases but {responses} responses")]
    LengthMismatch { cases: usize, responses: usize },
    #[error("case {0:?}: malformed metadata")]
    BadCase(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiahCase {
    pub id: String,
    pub context: String,
    pub needle: String,
    pub question: String,
    pub answer_key: String,
    pub target_length_tokens: usize,
    pub depth_percent: f64,
    pub context_tokens: usize,
}

impl NiahCase {
    pub fn to_document(&self) -> Document {
        Document::new(&self.id, &self.context, "niah", Lang::Other)
            .with_meta("needle", &self.needle)
            .with_meta("question", &self.question)
            .with_meta("answer_key", &self.answer_key)
            .with_meta("target_length_tokens", self.target_length_tokens.to_string())
            .with_meta("depth_percent", self.depth_percent.to_string())
            .with_meta("context_tokens", self.context_tokens.to_string())
    }

    pub fn from_document(doc: &Document) -> Result<Self, NiahError> {
        let bad = || NiahError::BadCase(doc.id.clone());
        let get = |k: &str| doc.meta.get(k).cloned().ok_or_else(bad);
        Ok(NiahCase {
            id: doc.id.clone(),
            context: doc.text.clone(),
            needle: get("needle")?,
            question: get("question")?,
            answer_key: get("answer_key")?,
            target_length_tokens: get("target_length_tokens")?.parse().map_err(|_| bad())?,
            depth_percent: get("depth_percent")?.parse().map_err(|_| bad())?,
            context_tokens: get("context_tokens")?.parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiahConfig {
    pub lengths: Vec<usize>,
    pub depths: Vec<f64>,
    pub needle: String,
    pub question: String,
    pub answer_key: String,
    #[serde(default)]
    pub tokenizer: TokenizerSpec,
    #[serde(default)]
    pub seed: u64,
}

impl NiahConfig {
    /// The classic San Francisco needle.
    pub fn classic(lengths: Vec<usize>, depths: Vec<f64>, seed: u64) -> Self {
        NiahConfig {
            lengths,
            depths,
            needle: "The best thing to do in San Francisco is to eat a sandwich and sit in Dolores Park on a sunny day."
                .to_string(),
            question: "What is the best thing to do in San Francisco?".to_string(),
            answer_key: "eat a sandwich and sit in Dolores Park on a sunny day".to_string(),
            tokenizer: TokenizerSpec::whitespace(),
            seed,
        }
    }
}

const LENGTH_TOLERANCE: f64 = 0.02;

/// Largest char prefix of `s` whose token count is at most `budget`.
fn prefix_within(s: &str, budget: usize, tok: &TokenizerSpec) -> Result<String, CorpusError> {
    let bounds: Vec<usize> = s.char_indices().map(|(i, _)| i).chain(std::iter::once(s.len())).collect();
    let (mut lo, mut hi) = (0usize, bounds.len() - 1);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if count_tokens(s[..bounds[mid]].trim_end(), tok)? <= budget {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Ok(s[..bounds[lo]].trim_end().to_string())
}

/// Filler sentences totalling `budget` tokens (joined by single spaces), drawn
/// from documents in a seeded order. The final sentence may be cut short so
/// the total lands on target.
fn assemble_filler(
    docs: &[Document],
    budget: usize,
    tok: &TokenizerSpec,
    seed: u64,
) -> Result<Vec<String>, NiahError> {
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out: Vec<String> = Vec::new();
    let mut used = 0usize;
    for i in order {
        for s in split_sentences(&docs[i].text) {
            let joined = if out.is_empty() { s.to_string() } else { format!(" {s}") };
            let cost = count_tokens(&joined, tok)?;
            if used + cost <= budget {
                used += cost;
                out.push(s.to_string());
                if used == budget {
                    return Ok(out);
                }
                continue;
            }
            let slack = budget - used;
            if (slack as f64) > LENGTH_TOLERANCE * budget as f64 {
                let sep = if out.is_empty() { 0 } else { count_tokens(" ", tok)? };
                let cut = prefix_within(s, slack.saturating_sub(sep), tok)?;
                if !cut.is_empty() {
                    out.push(cut);
                }
            }
            return Ok(out);
        }
    }
    Err(NiahError::InsufficientHaystack {
        available: used,
        needed: budget,
    })
}

fn build_case(filler: &[String], cfg: &NiahConfig, target: usize, depth: f64) -> Result<NiahCase, NiahError> {
    // Candidate insertion points are sentence boundaries; pick the one whose
    // character offset is closest to depth% of the filler.
    let total_chars: usize = filler.iter().map(|s| s.chars().count()).sum::<usize>() + filler.len().saturating_sub(1);
    let want = depth / 100.0 * total_chars as f64;
    let mut best = (0usize, f64::INFINITY);
    let mut offset = 0usize;
    for k in 0..=filler.len() {
        let dist = (offset as f64 - want).abs();
        if dist < best.1 {
            best = (k, dist);
        }
        if k < filler.len() {
            offset += filler[k].chars().count() + 1;
        }
    }
    let mut parts: Vec<&str> = filler.iter().map(String::as_str).collect();
    parts.insert(best.0, cfg.needle.as_str());
    let context = parts.join(" ");
    let context_tokens = count_tokens(&context, &cfg.tokenizer)?;
    if (context_tokens as f64 - target as f64).abs() > LENGTH_TOLERANCE * target as f64 {
        return Err(NiahError::LengthMiss {
            target,
            got: context_tokens,
        });
    }
    if context.matches(cfg.needle.as_str()).count() != 1 {
        return Err(NiahError::NeedleCollision("assembled context".to_string()));
    }
    Ok(NiahCase {
        id: format!("niah-L{target}-D{depth}"),
        context,
        needle: cfg.needle.clone(),
        question: cfg.question.clone(),
        answer_key: cfg.answer_key.clone(),
        target_length_tokens: target,
        depth_percent: depth,
        context_tokens,
    })
}

/// One case per (length, depth) pair, lengths outermost. All depths of a
/// length share the same filler so only the needle position varies.
pub fn build_niah(haystack: &[Document], cfg: &NiahConfig) -> Result<Vec<NiahCase>, NiahError> {
    for &d in &cfg.depths {
        if !(0.0..=100.0).contains(&d) {
            return Err(NiahError::BadDepth(d));
        }
    }
    if let Some(doc) = haystack.iter().find(|d| d.text.contains(cfg.needle.as_str())) {
        return Err(NiahError::NeedleCollision(doc.id.clone()));
    }
    let available: usize = haystack
        .iter()
        .map(|d| count_tokens(&d.text, &cfg.tokenizer))
        .sum::<Result<_, _>>()?;
    let max_len = cfg.lengths.iter().copied().max().unwrap_or(0);
    if available < max_len {
        return Err(NiahError::InsufficientHaystack {
            available,
            needed: max_len,
        });
    }
    let needle_tokens = count_tokens(&cfg.needle, &cfg.tokenizer)?;
    let sep = count_tokens(" ", &cfg.tokenizer)?;
    let mut cases = Vec::new();
    for &len in &cfg.lengths {
        if len <= needle_tokens + sep {
            return Err(NiahError::TooShort {
                target: len,
                needle: needle_tokens,
            });
        }
        let filler = assemble_filler(
            haystack,
            len - needle_tokens - sep,
            &cfg.tokenizer,
            derive_seed(cfg.seed, &format!("niah.length.{len}")),
        )?;
        for &depth in &cfg.depths {
            cases.push(build_case(&filler, cfg, len, depth)?);
        }
    }
    Ok(cases)
}

/// Lowercase, punctuation to spaces, whitespace collapsed.
pub fn normalize_answer(s: &str) -> String {
    let mapped: String = s
        .to_lowercase()
        .chars()
        .map(|c| if classify_char(c) == CharClass::Punct { ' ' } else { c })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn niah_pass(case: &NiahCase, response: &str) -> bool {
    let key = normalize_answer(&case.answer_key);
    !key.is_empty() && normalize_answer(response).contains(&key)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiahGrid {
    pub lengths: Vec<usize>,
    pub depths: Vec<f64>,
    /// `pass_rate[length][depth]`; `None` where no case exists.
    pub pass_rate: Vec<Vec<Option<f64>>>,
    pub per_case: Vec<bool>,
}

impl NiahGrid {
    /// Plain-text table: one row per length, one column per depth.
    pub fn heatmap(&self) -> String {
        let mut out = String::from("length\\depth");
        for d in &self.depths {
            let _ = write!(out, "\t{d}");
        }
        out.push('\n');
        for (li, l) in self.lengths.iter().enumerate() {
            let _ = write!(out, "{l}");
            for cell in &self.pass_rate[li] {
                match cell {
                    Some(r) => {
                        let _ = write!(out, "\t{r:.2}");
                    }
                    None => out.push_str("\t-"),
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn score_niah<S: AsRef<str>>(cases: &[NiahCase], responses: &[S]) -> Result<NiahGrid, NiahError> {
    if cases.len() != responses.len() {
        return Err(NiahError::LengthMismatch {
            cases: cases.len(),
            responses: responses.len(),
        });
    }
    let per_case: Vec<bool> = cases.iter().zip(responses).map(|(c, r)| niah_pass(c, r.as_ref())).collect();
    let mut lengths: Vec<usize> = cases.iter().map(|c| c.target_length_tokens).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let mut depths: Vec<f64> = cases.iter().map(|c| c.depth_percent).collect();
    depths.sort_by(f64::total_cmp);
    depths.dedup();
    let mut cells: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    for (c, pass) in cases.iter().zip(&per_case) {
        let li = lengths.binary_search(&c.target_length_tokens).expect("length present");
        let di = depths.iter().position(|d| *d == c.depth_percent).expect("depth present");
        let e = cells.entry((li, di)).or_default();
        e.0 += usize::from(*pass);
        e.1 += 1;
    }
    let pass_rate = (0..lengths.len())
        .map(|li| {
            (0..depths.len())
                .map(|di| cells.get(&(li, di)).map(|(p, n)| *p as f64 / *n as f64))
                .collect()
        })
        .collect();
    Ok(NiahGrid {
        lengths,
        depths,
        pass_rate,
        per_case,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn haystack() -> Vec<Document> {
        let words = ["river", "stone", "lantern", "meadow", "copper", "harbor", "willow", "ember"];
        (0..60)
            .map(|d| {
                let text: Vec<String> = (0..12)
                    .map(|s| {
                        let n = 5 + (d + s) % 9;
                        let body: Vec<&str> = (0..n).map(|w| words[(d * 7 + s * 3 + w) % words.len()]).collect();
                        format!("{}.", body.join(" "))
                    })
                    .collect();
                Document::new(format!("h{d}"), &text.join(" "), "essays", Lang::En)
            })
            .collect()
    }

    #[test]
    fn grid_shape_and_invariants() {
        let cfg = NiahConfig::classic(vec![1000, 2000], vec![0.0, 50.0, 100.0], 3);
        let cases = build_niah(&haystack(), &cfg).unwrap();
        assert_eq!(cases.len(), 6);
        for c in &cases {
            assert_eq!(c.context.matches(&c.needle).count(), 1);
            let n = count_tokens(&c.context, &cfg.tokenizer).unwrap();
            assert!((n as f64 - c.target_length_tokens as f64).abs() <= 0.02 * c.target_length_tokens as f64);
            if c.depth_percent == 0.0 {
                assert!(c.context.starts_with(&c.needle));
            }
            if c.depth_percent == 100.0 {
                assert!(c.context.ends_with(&c.needle));
            }
        }
        let mid = &cases[1];
        let pos = mid.context.find(&mid.needle).unwrap() as f64 / mid.context.len() as f64;
        assert!((pos - 0.5).abs() < 0.05, "{pos}");
    }

    #[test]
    fn deterministic_by_seed() {
        let cfg = NiahConfig::classic(vec![500], vec![25.0], 9);
        assert_eq!(build_niah(&haystack(), &cfg).unwrap(), build_niah(&haystack(), &cfg).unwrap());
        let other = NiahConfig { seed: 10, ..cfg.clone() };
        assert_ne!(build_niah(&haystack(), &cfg).unwrap()[0].context, build_niah(&haystack(), &other).unwrap()[0].context);
    }

    #[test]
    fn precondition_errors() {
        let cfg = NiahConfig::classic(vec![1_000_000], vec![0.0], 1);
        assert!(matches!(build_niah(&haystack(), &cfg), Err(NiahError::InsufficientHaystack { .. })));
        let mut hay = haystack();
        hay.push(Document::new("bad", &cfg.needle, "x", Lang::En));
        let cfg = NiahConfig::classic(vec![100], vec![0.0], 1);
        assert!(matches!(build_niah(&hay, &cfg), Err(NiahError::NeedleCollision(id)) if id == "bad"));
        let cfg = NiahConfig::classic(vec![100], vec![120.0], 1);
        assert!(matches!(build_niah(&haystack(), &cfg), Err(NiahError::BadDepth(_))));
    }

    #[test]
    fn thai_haystack_with_thai_aware_counts() {
        let hay: Vec<_> = (0..30)
            .map(|i| Document::new(format!("t{i}"), &"วันนี้อากาศดีมาก เราไปเที่ยวทะเลกัน\n".repeat(10), "th", Lang::Th))
            .collect();
        let cfg = NiahConfig {
            tokenizer: TokenizerSpec::thai_aware(),
            needle: "สิ่งที่ดีที่สุดคือการกินแซนด์วิช".to_string(),
            answer_key: "การกินแซนด์วิช".to_string(),
            ..NiahConfig::classic(vec![3000], vec![0.0, 50.0], 2)
        };
        let cases = build_niah(&hay, &cfg).unwrap();
        for c in &cases {
            let n = count_tokens(&c.context, &cfg.tokenizer).unwrap();
            assert!((n as f64 - 3000.0).abs() <= 60.0, "{n}");
        }
    }

    #[test]
    fn scoring_rules() {
        let cfg = NiahConfig::classic(vec![300], vec![0.0, 100.0], 1);
        let cases = build_niah(&haystack(), &cfg).unwrap();
        let grid = score_niah(&cases, &["Eat a sandwich, and sit in Dolores Park on a sunny day!", "no idea"]).unwrap();
        assert_eq!(grid.per_case, vec![true, false]);
        assert_eq!(grid.pass_rate, vec![vec![Some(1.0), Some(0.0)]]);
        assert!(grid.heatmap().contains("1.00"));
        assert!(niah_pass(&cases[0], "eat a sandwich and sit in dolores park on a sunny day"));
        assert!(matches!(score_niah(&cases, &["x"]), Err(NiahError::LengthMismatch { .. })));
    }

    #[test]
    fn document_round_trip() {
        let cases = build_niah(&haystack(), &NiahConfig::classic(vec![200], vec![50.0], 1)).unwrap();
        assert_eq!(NiahCase::from_document(&cases[0].to_document()).unwrap(), cases[0]);
    }
}

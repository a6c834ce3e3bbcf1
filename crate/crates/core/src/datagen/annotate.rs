//! Corpus annotation on an integer scale, textbook-rewrite selection, and a
//! client-backed scorer for threshold stages.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{first_integer, parse_score, Annotator, DatagenError};
use crate::corpus::Document;
use crate::hashing::derive_seed;
use crate::quality::{LabeledDoc, Provenance, ScoreError, Scorer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantineRecord {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationOutcome {
    pub labeled: Vec<LabeledDoc>,
    pub quarantined: Vec<QuarantineRecord>,
}

/// Asks the client to rate each document on `[lo, hi]`. The first integer in
/// a reply is the label; replies without one, or with one outside the
/// scale, are quarantined rather than clamped.
pub fn annotate_corpus(
    docs: &[Document],
    annotator: &Annotator,
    rubric: &str,
    scale: (i64, i64),
) -> Result<AnnotationOutcome, DatagenError> {
    let (lo, hi) = scale;
    if lo >= hi {
        return Err(DatagenError::Invalid(format!("scale {lo}..{hi} is empty")));
    }
    let (lo_s, hi_s) = (lo.to_string(), hi.to_string());
    let replies: Vec<Result<String, DatagenError>> = docs
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            annotator.call(
                "annotate",
                &format!("annotate-{i:06}"),
                &[("rubric", rubric), ("lo", &lo_s), ("hi", &hi_s), ("text", &d.text)],
            )
        })
        .collect();
    let mut out = AnnotationOutcome {
        labeled: Vec::new(),
        quarantined: Vec::new(),
    };
    for (d, r) in docs.iter().zip(replies) {
        let verdict = r.and_then(|reply| match first_integer(&reply) {
            Some(v) if (lo..=hi).contains(&v) => Ok(v),
            Some(v) => Err(DatagenError::Invalid(format!("label {v} outside {lo}..{hi}"))),
            None => Err(DatagenError::Unparseable { reply, lo, hi }),
        });
        match verdict {
            Ok(v) => out.labeled.push(LabeledDoc::new(d.clone(), v.to_string(), Provenance::LlmAnnotated)),
            Err(e) => out.quarantined.push(QuarantineRecord {
                id: d.id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    Ok(out)
}

/// Seeded uniform choice of ⌊fraction·n⌋ documents; both halves keep input
/// order.
pub fn select_for_augmentation(
    corpus: Vec<Document>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<Document>, Vec<Document>), DatagenError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DatagenError::Invalid(format!("fraction {fraction} not in (0, 1)")));
    }
    let n = corpus.len();
    let k = (fraction * n as f64 + 1e-9).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "augment.select"));
    let mut pick = vec![false; n];
    for i in sample(&mut rng, n, k) {
        pick[i] = true;
    }
    let (sel, rest): (Vec<_>, Vec<_>) = corpus.into_iter().zip(pick).partition(|(_, p)| *p);
    Ok((sel.into_iter().map(|(d, _)| d).collect(), rest.into_iter().map(|(d, _)| d).collect()))
}

/// Rewrites selected documents through the client. Successful rewrites get
/// `provenance = textbook-rewrite` and `source_id`; failures are returned as
/// quarantine records.
pub fn rewrite_as_textbook(
    selected: &[Document],
    annotator: &Annotator,
) -> (Vec<Document>, Vec<QuarantineRecord>) {
    let replies: Vec<Result<String, DatagenError>> = selected
        .par_iter()
        .enumerate()
        .map(|(i, d)| annotator.call("textbook", &format!("textbook-{i:06}"), &[("text", &d.text)]))
        .collect();
    let mut docs = Vec::new();
    let mut failed = Vec::new();
    for (d, r) in selected.iter().zip(replies) {
        match r {
            Ok(t) if !t.trim().is_empty() => docs.push(
                d.with_text(t.trim().to_string())
                    .with_meta("provenance", "textbook-rewrite")
                    .with_meta("source_id", &d.id),
            ),
            Ok(_) => failed.push(QuarantineRecord {
                id: d.id.clone(),
                reason: "empty rewrite".into(),
            }),
            Err(e) => failed.push(QuarantineRecord {
                id: d.id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    (docs, failed)
}

/// Uses the annotation client as a threshold-stage scorer.
pub struct ClientScorer<'a> {
    pub annotator: &'a Annotator<'a>,
    pub rubric: String,
    pub scale: (i64, i64),
}

impl Scorer for ClientScorer<'_> {
    fn score(&self, doc: &Document) -> Result<f64, ScoreError> {
        let (lo, hi) = (self.scale.0.to_string(), self.scale.1.to_string());
        let rid = format!("score-{}", doc.id);
        let reply = self
            .annotator
            .call("annotate", &rid, &[("rubric", &self.rubric), ("lo", &lo), ("hi", &hi), ("text", &doc.text)])
            .map_err(|e| ScoreError(e.to_string()))?;
        parse_score(&reply, self.scale.0, self.scale.1)
            .map(|v| v as f64)
            .map_err(|e| ScoreError(e.to_string()))
    }
}

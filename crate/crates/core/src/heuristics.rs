//! Line- and document-level heuristic quality filters.
//!
//! Line signals catch SEO spam (phone-number lists, keyword dumps) and
//! punctuation debris; document signals catch near-empty pages and
//! newline-heavy layouts. Thai characters count as letters, so Thai prose is
//! not penalised for lacking Latin text.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{char_stats, Document};

#[derive(Debug, Error, PartialEq)]
#[error("threshold {name} = {value} outside its domain")]
pub struct ThresholdError {
    pub name: &'static str,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSignal {
    pub digit_to_text_ratio: f64,
    pub punct_density: f64,
    /// Characters after trimming surrounding whitespace.
    pub length_chars: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DocSignal {
    pub newline_ratio: f64,
    pub length_chars: usize,
    pub length_lines: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterThresholds {
    pub max_digit_ratio: f64,
    pub max_punct_density: f64,
    pub min_line_chars: usize,
    pub max_newline_ratio: f64,
    pub min_doc_chars: usize,
    pub max_doc_chars: Option<usize>,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        FilterThresholds {
            max_digit_ratio: 0.3,
            max_punct_density: 0.25,
            min_line_chars: 3,
            max_newline_ratio: 0.3,
            min_doc_chars: 200,
            max_doc_chars: None,
        }
    }
}

impl FilterThresholds {
    pub fn validate(&self) -> Result<(), ThresholdError> {
        for (name, value) in [
            ("max_digit_ratio", self.max_digit_ratio),
            ("max_punct_density", self.max_punct_density),
            ("max_newline_ratio", self.max_newline_ratio),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(ThresholdError { name, value });
            }
        }
        if let Some(max) = self.max_doc_chars {
            if max < self.min_doc_chars {
                return Err(ThresholdError {
                    name: "max_doc_chars",
                    value: max as f64,
                });
            }
        }
        Ok(())
    }
}

pub fn line_signals(line: &str) -> LineSignal {
    let s = char_stats(line);
    LineSignal {
        digit_to_text_ratio: s.digit as f64 / (s.letters() + s.digit).max(1) as f64,
        punct_density: s.punct as f64 / s.non_whitespace().max(1) as f64,
        length_chars: line.trim().chars().count(),
    }
}

pub fn doc_signals(text: &str) -> DocSignal {
    let length_chars = text.chars().count();
    let newlines = text.chars().filter(|&c| c == '\n').count();
    DocSignal {
        newline_ratio: newlines as f64 / length_chars.max(1) as f64,
        length_chars,
        length_lines: if text.is_empty() { 0 } else { newlines + 1 },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineRule {
    MaxDigitRatio,
    MaxPunctDensity,
    MinLineChars,
}

pub fn line_violations(sig: &LineSignal, t: &FilterThresholds) -> Vec<LineRule> {
    let mut v = Vec::new();
    if sig.digit_to_text_ratio > t.max_digit_ratio {
        v.push(LineRule::MaxDigitRatio);
    }
    if sig.punct_density > t.max_punct_density {
        v.push(LineRule::MaxPunctDensity);
    }
    if sig.length_chars < t.min_line_chars {
        v.push(LineRule::MinLineChars);
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovedLine {
    pub doc_id: String,
    /// 1-based line number in the original text.
    pub line_no: usize,
    pub text: String,
    pub reasons: Vec<LineRule>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineFilterResult {
    pub doc: Document,
    pub removed: Vec<RemovedLine>,
    /// Every line was removed; the document should be dropped.
    pub emptied: bool,
}

/// Drops lines violating any line threshold and re-joins the rest with `\n`.
pub fn filter_lines(doc: &Document, t: &FilterThresholds) -> LineFilterResult {
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for (i, line) in doc.text.lines().enumerate() {
        let reasons = line_violations(&line_signals(line), t);
        if reasons.is_empty() {
            kept.push(line);
        } else {
            removed.push(RemovedLine {
                doc_id: doc.id.clone(),
                line_no: i + 1,
                text: line.to_string(),
                reasons,
            });
        }
    }
    let text = kept.join("\n");
    let out = if removed.is_empty() && text == doc.text {
        doc.clone()
    } else {
        doc.with_text(text)
    };
    LineFilterResult {
        emptied: out.text.is_empty(),
        doc: out,
        removed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocRule {
    MinDocChars,
    MaxDocChars,
    MaxNewlineRatio,
}

impl DocRule {
    pub fn as_str(self) -> &'static str {
        match self {
            DocRule::MinDocChars => "min_doc_chars",
            DocRule::MaxDocChars => "max_doc_chars",
            DocRule::MaxNewlineRatio => "max_newline_ratio",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocVerdict {
    pub keep: bool,
    pub reasons: Vec<DocRule>,
    pub signal: DocSignal,
}

pub fn filter_doc(doc: &Document, t: &FilterThresholds) -> DocVerdict {
    let signal = doc_signals(&doc.text);
    let mut reasons = Vec::new();
    if signal.length_chars < t.min_doc_chars {
        reasons.push(DocRule::MinDocChars);
    }
    if t.max_doc_chars.is_some_and(|max| signal.length_chars > max) {
        reasons.push(DocRule::MaxDocChars);
    }
    if signal.newline_ratio > t.max_newline_ratio {
        reasons.push(DocRule::MaxNewlineRatio);
    }
    DocVerdict {
        keep: reasons.is_empty(),
        reasons,
        signal,
    }
}

/// One audit-log entry: a removed line or a dropped document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AuditRecord {
    Line(RemovedLine),
    Doc { doc_id: String, reasons: Vec<DocRule> },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub input_docs: usize,
    pub kept_docs: usize,
    pub dropped_docs: usize,
    pub removed_lines: usize,
}

/// Line filtering followed by document filtering over a batch.
pub fn filter_corpus(docs: &[Document], t: &FilterThresholds) -> (Vec<Document>, Vec<AuditRecord>, FilterSummary) {
    use rayon::prelude::*;
    let results: Vec<(LineFilterResult, DocVerdict)> = docs
        .par_iter()
        .map(|d| {
            let lf = filter_lines(d, t);
            let verdict = filter_doc(&lf.doc, t);
            (lf, verdict)
        })
        .collect();
    let mut kept = Vec::new();
    let mut audit = Vec::new();
    let mut summary = FilterSummary {
        input_docs: docs.len(),
        ..Default::default()
    };
    for (lf, verdict) in results {
        summary.removed_lines += lf.removed.len();
        audit.extend(lf.removed.into_iter().map(AuditRecord::Line));
        if verdict.keep {
            kept.push(lf.doc);
        } else {
            audit.push(AuditRecord::Doc {
                doc_id: lf.doc.id.clone(),
                reasons: verdict.reasons,
            });
            summary.dropped_docs += 1;
        }
    }
    summary.kept_docs = kept.len();
    (kept, audit, summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Lang;
    use proptest::prelude::*;

    fn doc(text: &str) -> Document {
        Document::new("d", text, "web", Lang::Th)
    }

    #[test]
    fn line_signal_examples() {
        let s = line_signals("abc123");
        assert_eq!(s.digit_to_text_ratio, 0.5);
        let s = line_signals("!!!!");
        assert_eq!((s.punct_density, s.digit_to_text_ratio), (1.0, 0.0));
        let s = line_signals("");
        assert_eq!((s.punct_density, s.digit_to_text_ratio, s.length_chars), (0.0, 0.0, 0));
    }

    #[test]
    fn thai_counts_as_text() {
        let s = line_signals("ราคาสินค้า 100 บาท");
        assert!(s.digit_to_text_ratio < 0.3);
    }

    #[test]
    fn seo_digit_line_removed() {
        let d = doc("บทความเกี่ยวกับการท่องเที่ยว\n0812345678 0898765432\nเนื้อหาต่อจากนี้");
        let r = filter_lines(&d, &FilterThresholds::default());
        assert_eq!(r.removed.len(), 1);
        assert_eq!(r.removed[0].line_no, 2);
        assert_eq!(r.removed[0].reasons, vec![LineRule::MaxDigitRatio]);
        assert!(!r.doc.text.contains("081"));
        assert_eq!(d.text.lines().count(), 3);
    }

    #[test]
    fn passing_doc_unchanged_and_failing_doc_emptied() {
        let d = doc("first good line\nsecond good line");
        let r = filter_lines(&d, &FilterThresholds::default());
        assert_eq!(r.doc, d);
        assert!(r.removed.is_empty());
        let bad = doc("12345\n!!!!\nab");
        let r = filter_lines(&bad, &FilterThresholds::default());
        assert!(r.emptied);
        assert_eq!(r.doc.text, "");
        assert_eq!(r.removed.len(), 3);
    }

    #[test]
    fn doc_verdicts() {
        let t = FilterThresholds::default();
        let v = filter_doc(&doc("0123456789"), &t);
        assert!(!v.keep);
        assert_eq!(v.reasons, vec![DocRule::MinDocChars]);
        assert_eq!(v.reasons[0].as_str(), "min_doc_chars");

        let line = "abcd ".repeat(33);
        let mut lines = vec![format!("{line}e"); 5];
        lines.push(line);
        let prose = lines.join("\n");
        assert_eq!(prose.chars().count(), 1000);
        assert!((doc_signals(&prose).newline_ratio - 0.005).abs() < 1e-12);
        let v = filter_doc(&doc(&prose), &t);
        assert!(v.keep, "{v:?}");

        // 50 one-char lines separated by blank lines: 50 + 98 newlines = 148 chars.
        let sparse = vec!["x"; 50].join("\n\n");
        let sig = doc_signals(&sparse);
        assert_eq!(sig.length_chars, 148);
        assert!((sig.newline_ratio - 98.0 / 148.0).abs() < 1e-12);
        let v = filter_doc(&doc(&sparse), &t);
        assert!(v.reasons.contains(&DocRule::MaxNewlineRatio));
    }

    #[test]
    fn max_doc_chars_is_optional() {
        let t = FilterThresholds {
            min_doc_chars: 1,
            max_doc_chars: Some(5),
            ..Default::default()
        };
        assert_eq!(filter_doc(&doc("abcdefgh"), &t).reasons, vec![DocRule::MaxDocChars]);
        assert!(FilterThresholds { max_doc_chars: Some(10), ..Default::default() }.validate().is_err());
        assert!(FilterThresholds { max_digit_ratio: 1.5, ..Default::default() }.validate().is_err());
    }

    fn arb_text() -> impl Strategy<Value = String> {
        prop::collection::vec("[a-zกขค0-9!?.,  ]{0,20}", 0..10).prop_map(|l| l.join("\n"))
    }

    proptest! {
        #[test]
        fn filter_lines_idempotent(text in arb_text()) {
            let t = FilterThresholds::default();
            let once = filter_lines(&doc(&text), &t).doc;
            let twice = filter_lines(&once, &t).doc;
            prop_assert_eq!(once.text, twice.text);
        }

        #[test]
        fn loosening_never_removes_more(text in arb_text(), d in 0.0f64..0.5, p in 0.0f64..0.5, m in 0usize..6) {
            let strict = FilterThresholds { max_digit_ratio: d, max_punct_density: p, min_line_chars: m, ..Default::default() };
            let loose = FilterThresholds { max_digit_ratio: d + 0.1, max_punct_density: p + 0.1, min_line_chars: m.saturating_sub(1), ..Default::default() };
            let a = filter_lines(&doc(&text), &strict).removed.len();
            let b = filter_lines(&doc(&text), &loose).removed.len();
            prop_assert!(b <= a);
            let sv = filter_doc(&doc(&text), &strict);
            let lv = filter_doc(&doc(&text), &FilterThresholds { min_doc_chars: 100, ..strict.clone() });
            prop_assert!(lv.reasons.len() <= sv.reasons.len());
        }

        #[test]
        fn dropped_docs_carry_reasons(text in arb_text()) {
            let v = filter_doc(&doc(&text), &FilterThresholds::default());
            prop_assert_eq!(v.keep, v.reasons.is_empty());
        }
    }
}

//! Programmatically verifiable instruction constraints with strict and loose
//! checking, plus rejection filtering of generated instruction data.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{char_stats, is_thai, Lang};

#[derive(Debug, Error, PartialEq)]
pub enum ConstraintError {
    #[error("{kind}: {message}")]
    Malformed { kind: &'static str, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VerifiableConstraint {
    MaxWords { n: i64 },
    MinWords { n: i64 },
    MustInclude { text: String },
    ForbiddenWord { word: String },
    ResponseLanguage { lang: Lang },
    /// Exact number of `*`, `-` or `•` bullet lines.
    BulletCount { n: i64 },
    StartsWith { prefix: String },
    EndsWith { suffix: String },
    JsonParseable,
    AllLowercase,
}

impl VerifiableConstraint {
    pub fn kind(&self) -> &'static str {
        use VerifiableConstraint::*;
        match self {
            MaxWords { .. } => "max_words",
            MinWords { .. } => "min_words",
            MustInclude { .. } => "must_include",
            ForbiddenWord { .. } => "forbidden_word",
            ResponseLanguage { .. } => "response_language",
            BulletCount { .. } => "bullet_count",
            StartsWith { .. } => "starts_with",
            EndsWith { .. } => "ends_with",
            JsonParseable => "json_parseable",
            AllLowercase => "all_lowercase",
        }
    }

    pub fn validate(&self) -> Result<(), ConstraintError> {
        use VerifiableConstraint::*;
        let bad = |message: String| ConstraintError::Malformed {
            kind: self.kind(),
            message,
        };
        match self {
            MaxWords { n } | MinWords { n } | BulletCount { n } if *n < 0 => Err(bad(format!("negative count {n}"))),
            MustInclude { text: s } | ForbiddenWord { word: s } | StartsWith { prefix: s } | EndsWith { suffix: s }
                if s.is_empty() =>
            {
                Err(bad("empty string parameter".to_string()))
            }
            ResponseLanguage { lang: Lang::Other } => Err(bad("language must be th or en".to_string())),
            _ => Ok(()),
        }
    }

    /// Checks the constraint against the response exactly as given.
    pub fn holds(&self, response: &str) -> Result<bool, ConstraintError> {
        use VerifiableConstraint::*;
        self.validate()?;
        Ok(match self {
            MaxWords { n } => word_count(response) as i64 <= *n,
            MinWords { n } => word_count(response) as i64 >= *n,
            MustInclude { text } => response.to_lowercase().contains(&text.to_lowercase()),
            ForbiddenWord { word } => contains_word(response, word),
            ResponseLanguage { lang } => {
                let s = char_stats(response);
                let letters = s.letters().max(1) as f64;
                match lang {
                    Lang::Th => s.thai as f64 / letters > 0.5,
                    _ => s.latin as f64 / letters > 0.5,
                }
            }
            BulletCount { n } => bullet_lines(response) as i64 == *n,
            StartsWith { prefix } => response.starts_with(prefix.as_str()),
            EndsWith { suffix } => response.ends_with(suffix.as_str()),
            JsonParseable => serde_json::from_str::<serde_json::Value>(response).is_ok(),
            AllLowercase => response == response.to_lowercase(),
        })
    }
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

fn bullet_lines(s: &str) -> usize {
    s.lines()
        .map(str::trim_start)
        .filter(|l| l.starts_with("* ") || l.starts_with("- ") || l.starts_with("• "))
        .count()
}

/// `ForbiddenWord` holds when the word is ABSENT. Latin words match on
/// alphanumeric boundaries, case-insensitively; words containing Thai match
/// as substrings since Thai is written without spaces.
fn contains_word(response: &str, word: &str) -> bool {
    let hay = response.to_lowercase();
    let needle = word.to_lowercase();
    if needle.chars().any(is_thai) {
        return !hay.contains(&needle);
    }
    for (i, _) in hay.match_indices(&needle) {
        let before = hay[..i].chars().next_back();
        let after = hay[i + needle.len()..].chars().next();
        if !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric) {
            return false;
        }
    }
    true
}

/// Removes surrounding whitespace and a leading/trailing markdown code fence.
pub fn loosen(response: &str) -> String {
    let mut s = response.trim();
    if s.starts_with("```") {
        s = match s.find('\n') {
            Some(nl) => &s[nl + 1..],
            None => &s[3..],
        };
    }
    let t = s.trim_end();
    if let Some(stripped) = t.strip_suffix("```") {
        s = stripped;
    }
    s.trim().to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintOutcome {
    pub strict: Vec<bool>,
    pub loose: Vec<bool>,
}

impl ConstraintOutcome {
    pub fn prompt_strict(&self) -> bool {
        self.strict.iter().all(|&b| b)
    }

    pub fn prompt_loose(&self) -> bool {
        self.loose.iter().all(|&b| b)
    }
}

/// Loose results are strict results OR a re-check of the loosened response.
pub fn check_constraints(response: &str, constraints: &[VerifiableConstraint]) -> Result<ConstraintOutcome, ConstraintError> {
    let loosened = loosen(response);
    let mut strict = Vec::with_capacity(constraints.len());
    let mut loose = Vec::with_capacity(constraints.len());
    for c in constraints {
        let s = c.holds(response)?;
        strict.push(s);
        loose.push(s || c.holds(&loosened)?);
    }
    Ok(ConstraintOutcome { strict, loose })
}

/// Prompt-level and instruction-level accuracy, strict and loose.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IfMetrics {
    pub prompt_strict: f64,
    pub instruction_strict: f64,
    pub prompt_loose: f64,
    pub instruction_loose: f64,
}

impl IfMetrics {
    pub fn average(&self) -> f64 {
        (self.prompt_strict + self.instruction_strict + self.prompt_loose + self.instruction_loose) / 4.0
    }
}

/// Instruction-level metrics pool all instructions; prompts with no
/// constraints count as satisfied.
pub fn batch_metrics(outcomes: &[ConstraintOutcome]) -> IfMetrics {
    if outcomes.is_empty() {
        return IfMetrics::default();
    }
    let n = outcomes.len() as f64;
    let total: usize = outcomes.iter().map(|o| o.strict.len()).sum();
    let frac = |count: usize| if total == 0 { 1.0 } else { count as f64 / total as f64 };
    IfMetrics {
        prompt_strict: outcomes.iter().filter(|o| o.prompt_strict()).count() as f64 / n,
        prompt_loose: outcomes.iter().filter(|o| o.prompt_loose()).count() as f64 / n,
        instruction_strict: frac(outcomes.iter().flat_map(|o| &o.strict).filter(|&&b| b).count()),
        instruction_loose: frac(outcomes.iter().flat_map(|o| &o.loose).filter(|&&b| b).count()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IfSample {
    pub instruction: String,
    #[serde(default)]
    pub constraints: Vec<VerifiableConstraint>,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejected {
    pub sample: IfSample,
    /// Kinds of the constraints that failed strict checking.
    pub failed: Vec<String>,
}

/// Splits samples into those passing every constraint strictly and the rest.
pub fn filter_rejected(samples: Vec<IfSample>) -> Result<(Vec<IfSample>, Vec<Rejected>), ConstraintError> {
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for sample in samples {
        let outcome = check_constraints(&sample.response, &sample.constraints)?;
        if outcome.prompt_strict() {
            accepted.push(sample);
        } else {
            let failed = sample
                .constraints
                .iter()
                .zip(&outcome.strict)
                .filter(|(_, ok)| !**ok)
                .map(|(c, _)| c.kind().to_string())
                .collect();
            rejected.push(Rejected { sample, failed });
        }
    }
    Ok((accepted, rejected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use VerifiableConstraint::*;

    #[test]
    fn examples() {
        assert_eq!(check_constraints("hello world", &[MaxWords { n: 3 }]).unwrap().strict, vec![true]);
        assert_eq!(
            check_constraints("hello", &[MustInclude { text: "สวัสดี".into() }]).unwrap().strict,
            vec![false]
        );
        let o = check_constraints("```\nOK\n```", &[StartsWith { prefix: "OK".into() }]).unwrap();
        assert_eq!((o.strict[0], o.loose[0]), (false, true));
    }

    #[test]
    fn malformed_params() {
        assert!(matches!(MaxWords { n: -1 }.holds("x"), Err(ConstraintError::Malformed { .. })));
        assert!(MustInclude { text: String::new() }.holds("x").is_err());
        assert!(ResponseLanguage { lang: Lang::Other }.holds("x").is_err());
        let parsed: Result<VerifiableConstraint, _> = serde_json::from_str(r#"{"kind":"max_words","n":-3}"#);
        assert!(parsed.unwrap().validate().is_err());
    }

    #[test]
    fn forbidden_word_boundaries() {
        let c = ForbiddenWord { word: "cat".into() };
        assert!(c.holds("concatenate the category").unwrap());
        assert!(!c.holds("the Cat sat").unwrap());
        let t = ForbiddenWord { word: "แมว".into() };
        assert!(!t.holds("ฉันมีแมวสองตัว").unwrap());
    }

    #[test]
    fn filter_rejected_partitions() {
        let ok = IfSample {
            instruction: "say hi".into(),
            constraints: vec![AllLowercase, MaxWords { n: 2 }],
            response: "hi there".into(),
        };
        let bad = IfSample {
            instruction: "say hi".into(),
            constraints: vec![AllLowercase, MaxWords { n: 1 }],
            response: "hi there".into(),
        };
        let vacuous = IfSample {
            instruction: "anything".into(),
            constraints: vec![],
            response: "Whatever".into(),
        };
        let (acc, rej) = filter_rejected(vec![ok.clone(), bad, vacuous.clone()]).unwrap();
        assert_eq!(acc, vec![ok, vacuous]);
        assert_eq!(rej.len(), 1);
        assert_eq!(rej[0].failed, vec!["max_words"]);
    }

    #[test]
    fn metrics_aggregate() {
        let outcomes = vec![
            ConstraintOutcome { strict: vec![true, false], loose: vec![true, true] },
            ConstraintOutcome { strict: vec![true], loose: vec![true] },
        ];
        let m = batch_metrics(&outcomes);
        assert_eq!(m.prompt_strict, 0.5);
        assert_eq!(m.prompt_loose, 1.0);
        assert!((m.instruction_strict - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.instruction_loose, 1.0);
        assert!((m.average() - (0.5 + 2.0 / 3.0 + 2.0) / 4.0).abs() < 1e-12);
    }

    fn arb_constraint() -> impl Strategy<Value = VerifiableConstraint> {
        prop_oneof![
            (0i64..8).prop_map(|n| MaxWords { n }),
            (0i64..8).prop_map(|n| MinWords { n }),
            "[a-z]{1,3}".prop_map(|text| MustInclude { text }),
            "[a-z]{1,3}".prop_map(|word| ForbiddenWord { word }),
            Just(ResponseLanguage { lang: Lang::En }),
            (0i64..3).prop_map(|n| BulletCount { n }),
            "[a-zA-Z]{1,3}".prop_map(|prefix| StartsWith { prefix }),
            "[a-z.]{1,3}".prop_map(|suffix| EndsWith { suffix }),
            Just(JsonParseable),
            Just(AllLowercase),
        ]
    }

    fn arb_response() -> impl Strategy<Value = String> {
        ("[a-zA-Z{}\":,\\- \n]{0,30}", any::<bool>(), "[a-z]{0,5}").prop_map(|(body, fenced, lang)| {
            if fenced {
                format!("```{lang}\n{body}\n```")
            } else {
                body
            }
        })
    }

    proptest! {
        #[test]
        fn strict_implies_loose(batch in prop::collection::vec((arb_response(), prop::collection::vec(arb_constraint(), 0..4)), 1..10)) {
            let outcomes: Vec<_> = batch.iter().map(|(r, c)| check_constraints(r, c).unwrap()).collect();
            for o in &outcomes {
                for (s, l) in o.strict.iter().zip(&o.loose) {
                    prop_assert!(!s || *l);
                }
            }
            let m = batch_metrics(&outcomes);
            prop_assert!(m.prompt_loose >= m.prompt_strict);
            prop_assert!(m.instruction_loose >= m.instruction_strict);
        }
    }
}

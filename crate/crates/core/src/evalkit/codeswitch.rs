//! Code-switching accuracy: a response passes when Thai letters hold a strict
//! majority of its letters AND it contains no more than `tolerance` letters
//! from other scripts. Digits, punctuation and whitespace are neutral.

use serde::{Deserialize, Serialize};

use crate::corpus::char_stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodeSwitchVerdict {
    pub pass: bool,
    pub thai_letter_share: f64,
    pub foreign_letter_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeSwitchReport {
    pub verdicts: Vec<CodeSwitchVerdict>,
    pub accuracy: f64,
}

pub fn code_switch_verdict(response: &str, tolerance: usize) -> CodeSwitchVerdict {
    let s = char_stats(response);
    let foreign = s.latin + s.other_letter;
    let share = s.thai as f64 / (s.thai + foreign).max(1) as f64;
    CodeSwitchVerdict {
        pass: share > 0.5 && foreign <= tolerance,
        thai_letter_share: share,
        foreign_letter_count: foreign,
    }
}

pub fn code_switch_eval<S: AsRef<str>>(responses: &[S], tolerance: usize) -> CodeSwitchReport {
    let verdicts: Vec<_> = responses
        .iter()
        .map(|r| code_switch_verdict(r.as_ref(), tolerance))
        .collect();
    let passes = verdicts.iter().filter(|v| v.pass).count();
    CodeSwitchReport {
        accuracy: if verdicts.is_empty() {
            0.0
        } else {
            passes as f64 / verdicts.len() as f64
        },
        verdicts,
    }
}

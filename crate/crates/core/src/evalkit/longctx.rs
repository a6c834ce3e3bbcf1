//! Long-context QA: pad a short (context, question, answer) item with
//! unrelated filler documents until it clears a token floor, keeping the
//! original context intact at a random position.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{count_tokens, CorpusError, Document, Lang, TokenizerSpec};
use crate::hashing::derive_seed;

pub const DEFAULT_MIN_TOKENS: usize = 30_000;
const SEP: &str = "\n\n";

#[derive(Debug, Error)]
pub enum LongCtxError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("item {0:?}: answer not found in its context")]
    AnswerNotInContext(String),
    #[error("item {id:?}: fillers exhausted at {tokens} tokens (need more than {min})")]
    FillerExhausted { id: String, tokens: usize, min: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub id: String,
    pub context: String,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongCtxRecord {
    pub id: String,
    pub context: String,
    pub question: String,
    pub answer: String,
    /// Character offset of the answer divided by context length in chars.
    pub answer_position_fraction: f64,
    pub token_count: usize,
}

impl LongCtxRecord {
    pub fn to_document(&self) -> Document {
        Document::new(&self.id, &self.context, "longctx", Lang::Other)
            .with_meta("question", &self.question)
            .with_meta("answer", &self.answer)
            .with_meta("answer_position_fraction", format!("{:.6}", self.answer_position_fraction))
            .with_meta("token_count", self.token_count.to_string())
    }
}

fn char_fraction(haystack: &str, byte_pos: usize) -> f64 {
    let total = haystack.chars().count().max(1);
    haystack[..byte_pos].chars().count() as f64 / total as f64
}

/// Builds one record per item. Output tokens are strictly greater than
/// `min_tokens`. Fillers containing the answer string are skipped so the
/// answer stays unambiguous.
pub fn build_longctx_qa(
    items: &[QaItem],
    fillers: &[Document],
    min_tokens: usize,
    tokenizer: &TokenizerSpec,
    seed: u64,
) -> Result<Vec<LongCtxRecord>, LongCtxError> {
    let filler_tokens: Vec<usize> = fillers
        .iter()
        .map(|d| count_tokens(&d.text, tokenizer))
        .collect::<Result<_, _>>()?;
    let sep_tokens = count_tokens(SEP, tokenizer)?;
    items
        .iter()
        .map(|item| {
            if !item.context.contains(item.answer.as_str()) {
                return Err(LongCtxError::AnswerNotInContext(item.id.clone()));
            }
            let base = count_tokens(&item.context, tokenizer)?;
            if base > min_tokens {
                let pos = item.context.find(item.answer.as_str()).expect("checked above");
                return Ok(LongCtxRecord {
                    id: item.id.clone(),
                    context: item.context.clone(),
                    question: item.question.clone(),
                    answer: item.answer.clone(),
                    answer_position_fraction: char_fraction(&item.context, pos),
                    token_count: base,
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("longctx.{}", item.id)));
            let mut order: Vec<usize> = (0..fillers.len()).collect();
            order.shuffle(&mut rng);
            let mut chosen: Vec<&str> = Vec::new();
            let mut total = base;
            for i in order {
                if total > min_tokens {
                    break;
                }
                let f = &fillers[i].text;
                if f.trim().is_empty() || f.contains(item.answer.as_str()) {
                    continue;
                }
                chosen.push(f);
                total += filler_tokens[i] + sep_tokens;
            }
            if total <= min_tokens {
                return Err(LongCtxError::FillerExhausted {
                    id: item.id.clone(),
                    tokens: total,
                    min: min_tokens,
                });
            }
            let slot = rng.random_range(0..=chosen.len());
            let prefix_len: usize = chosen[..slot].iter().map(|s| s.len() + SEP.len()).sum();
            chosen.insert(slot, &item.context);
            let context = chosen.join(SEP);
            let answer_at = prefix_len + item.context.find(item.answer.as_str()).expect("checked above");
            let token_count = count_tokens(&context, tokenizer)?;
            Ok(LongCtxRecord {
                id: item.id.clone(),
                answer_position_fraction: char_fraction(&context, answer_at),
                context,
                question: item.question.clone(),
                answer: item.answer.clone(),
                token_count,
            })
        })
        .collect()
}

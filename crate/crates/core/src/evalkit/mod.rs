//! Bilingual evaluation builders and scorers.

pub mod codeswitch;
pub mod constraints;
pub mod longctx;
pub mod niah;

use crate::corpus::is_thai;

/// Splits text into sentences: after `.`, `!`, `?` (followed by whitespace or
/// end of text), at newlines, and at whitespace between two Thai characters.
/// Pieces are trimmed; empty pieces are dropped.
pub fn split_sentences(text: &str) -> Vec<&str> {
    fn push<'a>(piece: &'a str, out: &mut Vec<&'a str>) {
        let piece = piece.trim();
        if !piece.is_empty() {
            out.push(piece);
        }
    }
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0;
    for (k, &(i, c)) in chars.iter().enumerate() {
        let next = chars.get(k + 1).map(|&(_, n)| n);
        let end = i + c.len_utf8();
        let boundary = match c {
            '\n' => true,
            '.' | '!' | '?' => next.is_none_or(char::is_whitespace),
            c if c.is_whitespace() => {
                let prev = text[..i].trim_end().chars().next_back();
                let after = text[i..].trim_start().chars().next();
                prev.is_some_and(is_thai) && after.is_some_and(is_thai)
            }
            _ => false,
        };
        if boundary {
            push(&text[start..end], &mut out);
            start = end;
        }
    }
    push(&text[start..], &mut out);
    out
}

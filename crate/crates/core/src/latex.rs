//! LaTeX token sequences and model-output cleanup.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// One token and the byte range it occupies in its source.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpannedToken {
    pub text: String,
    pub span: Range<usize>,
}

fn is_letter(c: char) -> bool {
    c.is_ascii_alphabetic()
}

/// Splits LaTeX source into tokens, keeping byte spans.
///
/// A control sequence (backslash plus a maximal letter run, or backslash plus
/// one non-letter) is one token, a maximal digit run is one token, whitespace
/// separates tokens and is dropped, and every other character stands alone.
pub fn tokenize_spanned(source: &str) -> Vec<SpannedToken> {
    let mut out = Vec::new();
    let mut chars = source.char_indices().peekable();
    while let Some((start, c)) = chars.next() {
        if c.is_whitespace() {
            continue;
        }
        let mut end = start + c.len_utf8();
        if c == '\\' {
            match chars.peek().copied() {
                Some((_, next)) if is_letter(next) => {
                    while let Some(&(i, n)) = chars.peek() {
                        if !is_letter(n) {
                            break;
                        }
                        end = i + n.len_utf8();
                        chars.next();
                    }
                }
                Some((i, next)) => {
                    end = i + next.len_utf8();
                    chars.next();
                }
                None => {}
            }
        } else if c.is_ascii_digit() {
            while let Some(&(i, n)) = chars.peek() {
                if !n.is_ascii_digit() {
                    break;
                }
                end = i + n.len_utf8();
                chars.next();
            }
        }
        out.push(SpannedToken {
            text: source[start..end].to_string(),
            span: start..end,
        });
    }
    out
}

pub fn tokenize_latex(source: &str) -> Vec<String> {
    tokenize_spanned(source).into_iter().map(|t| t.text).collect()
}

/// Joins tokens with single spaces. Re-tokenizing the result yields the same tokens.
pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// LaTeX source together with its token sequence.
///
/// Tokens are derived once at construction; the source is never mutated afterwards.
#[derive(Clone, PartialEq, Eq)]
pub struct LatexDoc {
    source: Arc<str>,
    tokens: Arc<[String]>,
}

impl LatexDoc {
    pub fn new(source: impl Into<String>) -> Self {
        let source: String = source.into();
        let tokens = tokenize_latex(&source);
        Self {
            source: source.into(),
            tokens: tokens.into(),
        }
    }

    /// Builds a document from raw model output, removing fences and math delimiters.
    pub fn from_model_output(text: &str) -> Self {
        Self::new(strip_model_output(text))
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn same_tokens(&self, other: &LatexDoc) -> bool {
        self.tokens == other.tokens
    }
}

impl std::fmt::Debug for LatexDoc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "LatexDoc({:?})", &*self.source)
    }
}

impl Serialize for LatexDoc {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.source)
    }
}

impl<'de> Deserialize<'de> for LatexDoc {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d).map(LatexDoc::new)
    }
}

/// Returns the contents of every ``` fenced block in order.
fn fenced_blocks(text: &str) -> Vec<&str> {
    let mut blocks = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        // skip the info string (e.g. "latex") up to the end of the line
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
        let body = &after[body_start..];
        match body.find("```") {
            Some(close) => {
                blocks.push(&body[..close]);
                rest = &body[close + 3..];
            }
            None => {
                blocks.push(body);
                break;
            }
        }
    }
    blocks
}

fn strip_delimiters(mut s: &str) -> &str {
    loop {
        let t = s.trim();
        let stripped = [("$$", "$$"), ("\\[", "\\]"), ("\\(", "\\)"), ("$", "$")]
            .iter()
            .find_map(|(open, close)| {
                (t.len() >= open.len() + close.len() && t.starts_with(open) && t.ends_with(close))
                    .then(|| &t[open.len()..t.len() - close.len()])
            });
        match stripped {
            Some(inner) => s = inner,
            None => return t,
        }
    }
}

/// Removes markdown fences and `$`, `$$`, `\[ \]`, `\( \)` delimiters from model output.
///
/// When several fenced blocks are present the last one wins.
pub fn strip_model_output(text: &str) -> String {
    let body = fenced_blocks(text).last().copied().unwrap_or(text);
    strip_delimiters(body).to_string()
}

/// Pulls the final answer out of a step-by-step response: the last fenced
/// block if there is one, otherwise whatever follows the last "final answer" marker.
pub fn extract_final_answer(text: &str) -> String {
    if let Some(block) = fenced_blocks(text).last() {
        return strip_delimiters(block).to_string();
    }
    let lower = text.to_ascii_lowercase();
    if let Some(pos) = lower.rfind("final answer") {
        let tail = &text[pos + "final answer".len()..];
        let tail = tail.trim_start_matches([':', ' ', '\t', '\n', '\r']);
        return strip_delimiters(tail).to_string();
    }
    strip_delimiters(text).to_string()
}

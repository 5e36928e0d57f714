//! Step 1: answer -> atomic factoids through a fixed prompt and strict
//! line-oriented parsing.

use thiserror::Error;

use crate::gateway::{ChatBackend, CompletionRequest, GatewayError, GENERATION_MAX_TOKENS};
use crate::model::{Factoid, RunConfig, Span, Stage, UsageStats};
use crate::prompts;

#[derive(Debug, Error)]
pub enum DecomposeError {
    /// The model returned no parseable lines and fallback mode is off.
    #[error("decomposition returned no factoids")]
    DecompositionEmpty,
    #[error("backend failure during decomposition: {0}")]
    Backend(#[from] GatewayError),
}

/// Minimum overlap (fraction of the factoid length) for a span to count.
const SPAN_OVERLAP_THRESHOLD: f64 = 0.6;

pub struct Decomposition {
    pub factoids: Vec<Factoid>,
    /// True when the whole answer was used as a single factoid because the
    /// model produced nothing parseable.
    pub fallback_used: bool,
}

/// Decomposes the answer into factoids. Always runs at temperature 0; the
/// configured temperature applies to mutation generation only.
pub fn decompose(
    answer: &str,
    backend: &dyn ChatBackend,
    config: &RunConfig,
    usage: &mut UsageStats,
) -> Result<Decomposition, DecomposeError> {
    let template = prompts::decompose_template();
    let request = CompletionRequest {
        system_prompt: template.system_prompt.clone(),
        user_prompt: template.render_user(&[("answer", answer)]),
        temperature: 0.0,
        max_tokens: GENERATION_MAX_TOKENS,
        seed: Some(config.seed),
    };
    let result = backend.complete(&request)?;
    usage.record(Stage::Decompose, result.prompt_tokens, result.completion_tokens);

    let lines = parse_factoid_lines(&result.text);
    if lines.is_empty() {
        if !config.fallback_single_factoid {
            return Err(DecomposeError::DecompositionEmpty);
        }
        return Ok(Decomposition {
            factoids: vec![Factoid {
                index: 1,
                text: answer.trim().to_string(),
                answer_span: align_span(answer.trim(), answer),
            }],
            fallback_used: true,
        });
    }
    let factoids = lines
        .into_iter()
        .enumerate()
        .map(|(i, text)| Factoid {
            index: i + 1,
            answer_span: align_span(&text, answer),
            text,
        })
        .collect();
    Ok(Decomposition { factoids, fallback_used: false })
}

/// Splits raw model output into cleaned lines: strips leading enumeration
/// markers ("1.", "-", "•"), surrounding whitespace and quotes, drops empties.
pub fn parse_factoid_lines(raw: &str) -> Vec<String> {
    raw.lines()
        .map(clean_line)
        .filter(|l| !l.is_empty())
        .collect()
}

fn clean_line(line: &str) -> String {
    let mut s = line.trim();
    // enumeration markers: "1.", "2)", "-", "*", "•"
    if let Some(rest) = s.strip_prefix(|c: char| c == '-' || c == '*' || c == '•') {
        s = rest.trim_start();
    } else {
        let digits = s.chars().take_while(|c| c.is_ascii_digit()).count();
        if digits > 0 {
            let after = &s[digits..];
            if let Some(rest) = after.strip_prefix('.').or_else(|| after.strip_prefix(')')) {
                s = rest.trim_start();
            }
        }
    }
    s.trim_matches(|c| c == '"' || c == '\'' || c == '“' || c == '”').trim().to_string()
}

/// Locates a factoid inside the answer as the longest case-insensitive common
/// substring, kept only when it covers >= 60% of the factoid. The returned
/// range is in characters.
pub fn align_span(factoid_text: &str, answer: &str) -> Option<Span> {
    let needle: Vec<char> = factoid_text.to_lowercase().chars().collect();
    let haystack: Vec<char> = answer.to_lowercase().chars().collect();
    if needle.is_empty() || haystack.is_empty() {
        return None;
    }
    // O(n*m) longest common substring over answer x factoid.
    let mut best_len = 0usize;
    let mut best_end_in_answer = 0usize;
    let mut prev = vec![0usize; needle.len() + 1];
    for (i, hc) in haystack.iter().enumerate() {
        let mut row = vec![0usize; needle.len() + 1];
        for (j, nc) in needle.iter().enumerate() {
            if hc == nc {
                row[j + 1] = prev[j] + 1;
                if row[j + 1] > best_len {
                    best_len = row[j + 1];
                    best_end_in_answer = i + 1;
                }
            }
        }
        prev = row;
    }
    if (best_len as f64) < SPAN_OVERLAP_THRESHOLD * needle.len() as f64 {
        return None;
    }
    Some(Span { start: best_end_in_answer - best_len, end: best_end_in_answer })
}

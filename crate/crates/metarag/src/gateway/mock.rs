//! Deterministic offline backends.
//!
//! `TripleWorldMock` is a closed world of `subject|predicate|object` triples
//! with fixed synonym and antonym tables. It recognizes which pipeline stage
//! is calling from the shape of the rendered prompt and answers by rule, so
//! end-to-end runs have exactly computable scores:
//!
//! - decomposition: the answer is a period-separated list of triples; each
//!   triple becomes one factoid line.
//! - mutation: the j-th synonym variant replaces the predicate with the j-th
//!   synonym-table entry (identity when the table is short); the j-th antonym
//!   variant uses the j-th antonym-table entry (last entry when short).
//! - verification: predicates are normalized through the tables to a
//!   (base, polarity) form; a claim matching a context triple with the same
//!   base and polarity is entailed, same base with opposite polarity is
//!   contradicted, anything else has insufficient evidence.

use std::collections::BTreeMap;

use super::{mock_token_count, ChatBackend, CompletionRequest, CompletionResult, GatewayError};
use crate::model::MutationKind;

/// Canned-response backend keyed by request digest.
pub struct ScriptedMock {
    id: String,
    script: BTreeMap<String, String>,
}

impl ScriptedMock {
    pub fn new(script: BTreeMap<String, String>) -> Self {
        Self::with_id("scripted-mock".to_string(), script)
    }

    pub fn with_id(id: String, script: BTreeMap<String, String>) -> Self {
        ScriptedMock { id, script }
    }
}

impl ChatBackend for ScriptedMock {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let digest = super::request_digest(request);
        let text = self.script.get(&digest).ok_or_else(|| {
            GatewayError::MalformedResponse(format!("no scripted response for digest {digest}"))
        })?;
        Ok(mock_result(&self.id, request, text.clone()))
    }
}

fn mock_result(id: &str, request: &CompletionRequest, text: String) -> CompletionResult {
    CompletionResult {
        prompt_tokens: mock_token_count(&request.system_prompt)
            + mock_token_count(&request.user_prompt),
        completion_tokens: mock_token_count(&text),
        text,
        latency_ms: 0,
        model_id: id.to_string(),
    }
}

/// A `subject|predicate|object` statement.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Triple {
    subject: String,
    predicate: String,
    object: String,
}

fn parse_triple(line: &str) -> Option<Triple> {
    let cleaned = line.trim().trim_end_matches('.').trim();
    let mut parts = cleaned.split('|').map(|p| p.trim().to_lowercase());
    let triple = Triple {
        subject: parts.next()?,
        predicate: parts.next()?,
        object: parts.next()?,
    };
    if parts.next().is_some()
        || triple.subject.is_empty()
        || triple.predicate.is_empty()
        || triple.object.is_empty()
    {
        return None;
    }
    Some(triple)
}

/// Predicate polarity relative to its canonical base form.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Polarity {
    Positive,
    Negative,
}

pub struct TripleWorldMock {
    id: String,
    synonyms: BTreeMap<String, Vec<String>>,
    antonyms: BTreeMap<String, Vec<String>>,
}

impl TripleWorldMock {
    pub fn new(
        synonyms: BTreeMap<String, Vec<String>>,
        antonyms: BTreeMap<String, Vec<String>>,
    ) -> Self {
        Self::with_id("triple-world-mock".to_string(), synonyms, antonyms)
    }

    pub fn with_id(
        id: String,
        synonyms: BTreeMap<String, Vec<String>>,
        antonyms: BTreeMap<String, Vec<String>>,
    ) -> Self {
        let lower = |table: BTreeMap<String, Vec<String>>| {
            table
                .into_iter()
                .map(|(k, vs)| {
                    (k.to_lowercase(), vs.into_iter().map(|v| v.to_lowercase()).collect())
                })
                .collect()
        };
        TripleWorldMock { id, synonyms: lower(synonyms), antonyms: lower(antonyms) }
    }

    /// Collapses synonym-table members onto their canonical key.
    fn canon(&self, predicate: &str) -> String {
        if self.synonyms.contains_key(predicate) {
            return predicate.to_string();
        }
        for (key, members) in &self.synonyms {
            if members.iter().any(|m| m == predicate) {
                return key.clone();
            }
        }
        predicate.to_string()
    }

    /// Reduces a predicate to (canonical base, polarity): antonym-table
    /// members are the negative forms of their key.
    fn base_polarity(&self, predicate: &str) -> (String, Polarity) {
        let canon = self.canon(predicate);
        for (key, members) in &self.antonyms {
            if members.iter().any(|m| m == &canon) {
                return (key.clone(), Polarity::Negative);
            }
        }
        (canon, Polarity::Positive)
    }

    fn decompose(&self, answer: &str) -> String {
        answer
            .split('.')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn mutate(&self, factoid: &str, kind: MutationKind, n: usize) -> String {
        let Some(triple) = parse_triple(factoid) else {
            return vec![factoid.trim(); n].join("\n");
        };
        let table = match kind {
            MutationKind::Synonym => &self.synonyms,
            MutationKind::Antonym => &self.antonyms,
        };
        let entries = table.get(&triple.predicate).map(Vec::as_slice).unwrap_or(&[]);
        (0..n)
            .map(|j| {
                let predicate = match entries.get(j) {
                    Some(p) => p.clone(),
                    None => match kind {
                        MutationKind::Synonym => triple.predicate.clone(),
                        MutationKind::Antonym => entries
                            .last()
                            .cloned()
                            .unwrap_or_else(|| format!("not-{}", triple.predicate)),
                    },
                };
                format!("{}|{}|{}", triple.subject, predicate, triple.object)
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn verify(&self, claim: &str, context_lines: &[&str]) -> &'static str {
        let Some(claim_triple) = parse_triple(claim) else {
            return "Not sure";
        };
        let (claim_base, claim_pol) = self.base_polarity(&claim_triple.predicate);
        let mut contradicted = false;
        for line in context_lines {
            let Some(ctx) = parse_triple(line) else { continue };
            if ctx.subject != claim_triple.subject || ctx.object != claim_triple.object {
                continue;
            }
            let (ctx_base, ctx_pol) = self.base_polarity(&ctx.predicate);
            if ctx_base != claim_base {
                continue;
            }
            if ctx_pol == claim_pol {
                return "Yes";
            }
            contradicted = true;
        }
        if contradicted {
            "No"
        } else {
            "Not sure"
        }
    }
}

impl ChatBackend for TripleWorldMock {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let user = request.user_prompt.as_str();
        let text = if let Some(answer) = user.strip_prefix("Answer:\n") {
            self.decompose(answer)
        } else if user.contains("Factoid: ") {
            let factoid = extract_field(user, "Factoid: ").ok_or_else(|| {
                GatewayError::MalformedResponse("mutation prompt missing factoid".into())
            })?;
            let n: usize = extract_field(user, "Variants: ")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| {
                    GatewayError::MalformedResponse("mutation prompt missing variant count".into())
                })?;
            let kind = if request.system_prompt.contains("synonym") {
                MutationKind::Synonym
            } else {
                MutationKind::Antonym
            };
            self.mutate(&factoid, kind, n)
        } else if let Some(rest) = user.strip_prefix("Context:\n") {
            let (context, claim_part) = rest.split_once("\nClaim: ").ok_or_else(|| {
                GatewayError::MalformedResponse("verification prompt missing claim".into())
            })?;
            let context_lines: Vec<&str> = context.lines().collect();
            self.verify(claim_part.trim(), &context_lines).to_string()
        } else {
            return Err(GatewayError::MalformedResponse(
                "triple-world mock cannot interpret this prompt".into(),
            ));
        };
        Ok(mock_result(&self.id, request, text))
    }
}

fn extract_field(text: &str, label: &str) -> Option<String> {
    text.lines()
        .find_map(|line| line.strip_prefix(label))
        .map(|v| v.trim().to_string())
}

//! Deployment hooks: topic tagging, topic-aware threshold selection,
//! highlight / escalation actions, and append-only audit logging.
//!
//! Only query/context topics feed these decisions; no user attributes are
//! inferred or stored anywhere in this module.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use regex::RegexBuilder;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{DetectionInput, DetectionReport, FactoidScore, RunConfig, Span};

/// Keyword/regex rules shipped as the default tagger configuration.
pub const DEFAULT_TOPIC_RULES: &str = include_str!("../assets/topics.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicRule {
    pub label: String,
    /// Case-insensitive regex patterns matched against query and chunks.
    pub patterns: Vec<String>,
    pub sensitive: bool,
    /// Optional per-topic threshold override.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("failed to read topic rules: {0}")]
    RulesUnreadable(#[from] std::io::Error),
    #[error("invalid topic rules: {0}")]
    RulesInvalid(String),
    #[error("duplicate topic label: {0}")]
    DuplicateLabel(String),
    #[error("audit sink unavailable: {0}")]
    SinkUnavailable(String),
}

pub struct TopicRuleSet {
    rules: Vec<TopicRule>,
    compiled: Vec<Vec<regex::Regex>>,
}

impl TopicRuleSet {
    pub fn new(rules: Vec<TopicRule>) -> Result<Self, PolicyError> {
        let mut seen = BTreeSet::new();
        for rule in &rules {
            if !seen.insert(rule.label.clone()) {
                return Err(PolicyError::DuplicateLabel(rule.label.clone()));
            }
        }
        let compiled = rules
            .iter()
            .map(|rule| {
                rule.patterns
                    .iter()
                    .map(|p| {
                        RegexBuilder::new(p)
                            .case_insensitive(true)
                            .build()
                            .map_err(|e| PolicyError::RulesInvalid(e.to_string()))
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TopicRuleSet { rules, compiled })
    }

    /// Empty ruleset: nothing matches, every query uses the general threshold.
    pub fn empty() -> Self {
        TopicRuleSet { rules: Vec::new(), compiled: Vec::new() }
    }

    pub fn default_rules() -> Self {
        Self::from_json(DEFAULT_TOPIC_RULES).expect("bundled topic rules are valid")
    }

    pub fn from_json(json: &str) -> Result<Self, PolicyError> {
        let rules: Vec<TopicRule> =
            serde_json::from_str(json).map_err(|e| PolicyError::RulesInvalid(e.to_string()))?;
        Self::new(rules)
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn rules(&self) -> &[TopicRule] {
        &self.rules
    }

    fn rule(&self, label: &str) -> Option<&TopicRule> {
        self.rules.iter().find(|r| r.label == label)
    }
}

/// Labels whose patterns match the query or any context chunk, deduplicated,
/// in rule order.
pub fn tag_topics(query: &str, context: &[String], rules: &TopicRuleSet) -> Vec<String> {
    rules
        .rules
        .iter()
        .zip(&rules.compiled)
        .filter(|(_, regexes)| {
            regexes
                .iter()
                .any(|re| re.is_match(query) || context.iter().any(|c| re.is_match(c)))
        })
        .map(|(rule, _)| rule.label.clone())
        .collect()
}

/// Picks the flagging threshold: the identity threshold (or a stricter
/// per-topic override) when any matched topic is sensitive, otherwise the
/// general threshold. With several applicable thresholds the minimum wins.
pub fn select_threshold(topics: &[String], rules: &TopicRuleSet, config: &RunConfig) -> f64 {
    let candidates: Vec<f64> = topics
        .iter()
        .filter_map(|label| rules.rule(label))
        .filter(|rule| rule.sensitive)
        .map(|rule| rule.threshold.unwrap_or(config.threshold_identity))
        .collect();
    if candidates.is_empty() {
        config.threshold_general
    } else {
        candidates.iter().fold(f64::INFINITY, |a, &b| a.min(b))
    }
}

/// One highlighted factoid inside a flagged response. A missing span means
/// the claim could not be localized; the whole answer is the highlight then.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HighlightSpan {
    pub factoid_index: usize,
    pub text: String,
    pub span: Option<Span>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyAction {
    Pass {
        threshold: f64,
    },
    FlagWithHighlights {
        threshold: f64,
        spans: Vec<HighlightSpan>,
        /// Always true: flagged responses must cite retrieved evidence.
        citation_required: bool,
    },
    Escalate {
        threshold: f64,
        reason: String,
    },
    /// Emitted as an action code only; regeneration belongs to the host RAG
    /// system.
    Abstain {
        threshold: f64,
        reason: String,
    },
}

impl PolicyAction {
    /// Severity ordering: Pass < Flag/Abstain < Escalate.
    pub fn severity(&self) -> u8 {
        match self {
            PolicyAction::Pass { .. } => 0,
            PolicyAction::FlagWithHighlights { .. } | PolicyAction::Abstain { .. } => 1,
            PolicyAction::Escalate { .. } => 2,
        }
    }
}

/// Maps a scored response to its deployment action. Sensitive topics above
/// the escalation threshold go to human review; everything else that crosses
/// tau gets span highlighting with forced citation.
pub fn decide_action(
    h: f64,
    tau: f64,
    topics: &[String],
    rules: &TopicRuleSet,
    factoids: &[FactoidScore],
    escalation_threshold: f64,
) -> PolicyAction {
    let escalation_threshold = escalation_threshold.max(tau);
    if h < tau {
        return PolicyAction::Pass { threshold: tau };
    }
    let any_sensitive = topics
        .iter()
        .filter_map(|label| rules.rule(label))
        .any(|rule| rule.sensitive);
    if h >= escalation_threshold && any_sensitive {
        return PolicyAction::Escalate {
            threshold: tau,
            reason: format!(
                "hallucination score {h:.4} at or above escalation threshold {escalation_threshold:.4} in sensitive topic"
            ),
        };
    }
    let spans = factoids
        .iter()
        .filter(|f| f.score >= tau)
        .map(|f| HighlightSpan {
            factoid_index: f.index,
            text: f.text.clone(),
            span: f.answer_span,
        })
        .collect();
    PolicyAction::FlagWithHighlights { threshold: tau, spans, citation_required: true }
}

/// One append-only audit line. Carries topic labels and scores only; the
/// schema has no user-identity attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub timestamp: DateTime<Utc>,
    pub input_digest: String,
    pub topics: Vec<String>,
    pub response_score: f64,
    pub threshold: f64,
    pub factoids: Vec<AuditFactoid>,
    pub action: PolicyAction,
    pub config_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditFactoid {
    pub text: String,
    pub score: f64,
    pub span: Option<Span>,
}

pub fn input_digest(input: &DetectionInput) -> String {
    let mut hasher = Sha256::new();
    hasher.update(input.query.as_bytes());
    for chunk in &input.context {
        hasher.update([0x1f]);
        hasher.update(chunk.as_bytes());
    }
    hasher.update([0x1e]);
    hasher.update(input.answer.as_bytes());
    hex::encode(hasher.finalize())
}

pub fn config_fingerprint(config: &RunConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(json))
}

impl AuditRecord {
    pub fn from_report(report: &DetectionReport, config: &RunConfig) -> Self {
        AuditRecord {
            timestamp: Utc::now(),
            input_digest: input_digest(&report.input),
            topics: report.topics.clone(),
            response_score: report.response_score,
            threshold: report.threshold_used,
            factoids: report
                .factoids
                .iter()
                .map(|f| AuditFactoid {
                    text: f.text.clone(),
                    score: f.score,
                    span: f.answer_span,
                })
                .collect(),
            action: report.action.clone(),
            config_fingerprint: config_fingerprint(config),
        }
    }
}

/// Append-only JSONL sink; concurrent appends serialize on a single writer.
pub struct AuditSink {
    path: PathBuf,
    file: Mutex<std::fs::File>,
}

impl AuditSink {
    pub fn open(path: &Path) -> Result<Self, PolicyError> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| PolicyError::SinkUnavailable(format!("{}: {e}", path.display())))?;
        Ok(AuditSink { path: path.to_path_buf(), file: Mutex::new(file) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Serializes the record as one JSON line and appends it.
    pub fn append(&self, record: &AuditRecord) -> Result<(), PolicyError> {
        let line = serde_json::to_string(record)
            .map_err(|e| PolicyError::SinkUnavailable(e.to_string()))?;
        let mut file = self.file.lock().unwrap();
        writeln!(file, "{line}")
            .and_then(|_| file.flush())
            .map_err(|e| PolicyError::SinkUnavailable(e.to_string()))
    }
}

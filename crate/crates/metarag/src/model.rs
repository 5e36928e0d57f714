//! Domain types shared across the detection pipeline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::PolicyAction;

/// The (query, context, answer) triple under test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionInput {
    pub query: String,
    /// Retrieved context chunks, in retrieval order.
    pub context: Vec<String>,
    pub answer: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ValidationError {
    #[error("answer is empty")]
    EmptyAnswer,
    #[error("context has no chunks")]
    EmptyContext,
    #[error("context chunk {index} is empty")]
    EmptyChunk { index: usize },
}

/// Checks the `DetectionInput` invariants and returns the input unchanged.
pub fn validate_input(input: DetectionInput) -> Result<DetectionInput, ValidationError> {
    if input.answer.trim().is_empty() {
        return Err(ValidationError::EmptyAnswer);
    }
    if input.context.is_empty() {
        return Err(ValidationError::EmptyContext);
    }
    for (i, chunk) in input.context.iter().enumerate() {
        if chunk.trim().is_empty() {
            return Err(ValidationError::EmptyChunk { index: i });
        }
    }
    Ok(input)
}

/// Character range [start, end) into the answer text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

/// One atomic, independently verifiable proposition extracted from the answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Factoid {
    /// 1-based, contiguous across a decomposition.
    pub index: usize,
    pub text: String,
    /// Where the factoid sits inside the answer, when locatable.
    pub answer_span: Option<Span>,
}

/// The two metamorphic relations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationKind {
    Synonym,
    Antonym,
}

/// A perturbed variant of a factoid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutatedFactoid {
    pub parent_index: usize,
    /// 1-based within (parent, kind).
    pub variant_index: usize,
    pub kind: MutationKind,
    pub text: String,
}

/// Three-way entailment decision against the context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictDecision {
    Yes,
    No,
    NotSure,
}

/// A verifier decision together with the raw model output it was parsed from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub decision: VerdictDecision,
    pub raw_response: String,
    /// True when the raw output matched none of the three decisions and fell
    /// back to `NotSure`.
    #[serde(default)]
    pub unparseable: bool,
}

/// Verification cost, exactly one of {0, 1/2, 1}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Penalty {
    Zero,
    Half,
    One,
}

impl Penalty {
    pub fn value(self) -> f64 {
        match self {
            Penalty::Zero => 0.0,
            Penalty::Half => 0.5,
            Penalty::One => 1.0,
        }
    }
}

impl Serialize for Penalty {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for Penalty {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        if v == 0.0 {
            Ok(Penalty::Zero)
        } else if v == 0.5 {
            Ok(Penalty::Half)
        } else if v == 1.0 {
            Ok(Penalty::One)
        } else {
            Err(serde::de::Error::custom(format!(
                "penalty must be 0, 0.5 or 1, got {v}"
            )))
        }
    }
}

/// Audit trail for one verified mutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyEntry {
    pub parent_index: usize,
    pub variant_index: usize,
    pub kind: MutationKind,
    pub variant_text: String,
    pub verdict: Verdict,
    pub penalty: Penalty,
}

/// Per-factoid score S_i with its variant-level evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactoidScore {
    pub index: usize,
    pub text: String,
    pub answer_span: Option<Span>,
    /// Mean penalty over the factoid's verified mutations.
    pub score: f64,
    /// True when fewer than 2N penalties were obtained (mutation shortfall or
    /// verification failures); the mean is over what was measured.
    #[serde(default)]
    pub under_sampled: bool,
    pub penalties: Vec<PenaltyEntry>,
}

/// Per-stage call and token counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageUsage {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl StageUsage {
    fn add(&mut self, prompt_tokens: u64, completion_tokens: u64) {
        self.calls += 1;
        self.prompt_tokens += prompt_tokens;
        self.completion_tokens += completion_tokens;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Decompose,
    Mutate,
    Verify,
}

/// Token/call accounting across the three pipeline stages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageStats {
    pub decompose: StageUsage,
    pub mutate: StageUsage,
    pub verify: StageUsage,
    pub total: StageUsage,
}

impl UsageStats {
    /// Increments the stage counters and the totals by one call's counts.
    pub fn record(&mut self, stage: Stage, prompt_tokens: u64, completion_tokens: u64) {
        let slot = match stage {
            Stage::Decompose => &mut self.decompose,
            Stage::Mutate => &mut self.mutate,
            Stage::Verify => &mut self.verify,
        };
        slot.add(prompt_tokens, completion_tokens);
        self.total.add(prompt_tokens, completion_tokens);
    }

    pub fn total_tokens(&self) -> u64 {
        self.total.prompt_tokens + self.total.completion_tokens
    }
}

/// Verifier selection: one model or an ensemble of models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VerifierSpec {
    Single(String),
    Ensemble { ensemble: Vec<String> },
}

impl VerifierSpec {
    pub fn members(&self) -> Vec<&str> {
        match self {
            VerifierSpec::Single(m) => vec![m.as_str()],
            VerifierSpec::Ensemble { ensemble } => ensemble.iter().map(|s| s.as_str()).collect(),
        }
    }
}

fn default_threshold_general() -> f64 {
    0.5
}
fn default_threshold_identity() -> f64 {
    0.3
}
fn default_escalation_threshold() -> f64 {
    0.8
}

/// One detection/evaluation configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub decomposition_model: String,
    pub generation_model: String,
    pub verifier: VerifierSpec,
    /// N: variants per metamorphic relation.
    pub n_variants: usize,
    /// Applies to mutation generation only; decomposition and verification
    /// always run at temperature 0.
    pub temperature: f64,
    #[serde(default = "default_threshold_general")]
    pub threshold_general: f64,
    #[serde(default = "default_threshold_identity")]
    pub threshold_identity: f64,
    /// Above this score a sensitive-topic response escalates to human review.
    #[serde(default = "default_escalation_threshold")]
    pub escalation_threshold: f64,
    #[serde(default)]
    pub seed: u64,
    /// When true, an empty decomposition falls back to treating the whole
    /// answer as a single factoid instead of erroring.
    #[serde(default)]
    pub fallback_single_factoid: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("n_variants must be >= 1")]
    ZeroVariants,
    #[error("{field} must be within [0, 1]")]
    ThresholdOutOfRange { field: &'static str },
    #[error("temperature must be within [0, 2]")]
    TemperatureOutOfRange,
}

impl RunConfig {
    /// Validates invariants; returns operator-facing warnings for legal but
    /// suspicious settings.
    pub fn validate(&self) -> Result<Vec<String>, ConfigError> {
        if self.n_variants == 0 {
            return Err(ConfigError::ZeroVariants);
        }
        for (field, v) in [
            ("threshold_general", self.threshold_general),
            ("threshold_identity", self.threshold_identity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::ThresholdOutOfRange { field });
            }
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ConfigError::TemperatureOutOfRange);
        }
        let mut warnings = Vec::new();
        if self.threshold_identity > self.threshold_general {
            warnings.push(format!(
                "threshold_identity ({}) exceeds threshold_general ({}): sensitive topics will be flagged less strictly",
                self.threshold_identity, self.threshold_general
            ));
        }
        Ok(warnings)
    }
}

fn default_schema_version() -> String {
    "1".to_string()
}

/// Full outcome of one detection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    #[serde(default = "default_schema_version")]
    pub schema_version: String,
    pub input: DetectionInput,
    pub factoids: Vec<FactoidScore>,
    /// H = max over factoid scores.
    pub response_score: f64,
    /// The topic-aware threshold that was applied.
    pub threshold_used: f64,
    /// flagged iff response_score >= threshold_used.
    pub flagged: bool,
    pub topics: Vec<String>,
    pub action: PolicyAction,
    pub usage: UsageStats,
    pub latency_ms: u64,
    /// True when decomposition fell back to the whole answer as one factoid.
    #[serde(default)]
    pub fallback_used: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(q: &str, c: &[&str], a: &str) -> DetectionInput {
        DetectionInput {
            query: q.to_string(),
            context: c.iter().map(|s| s.to_string()).collect(),
            answer: a.to_string(),
        }
    }

    #[test]
    fn validate_accepts_minimal_input() {
        let ok = validate_input(input("q", &["c"], "a")).unwrap();
        assert_eq!(ok.answer, "a");
    }

    #[test]
    fn validate_rejects_empty_context() {
        assert_eq!(
            validate_input(input("q", &[], "a")),
            Err(ValidationError::EmptyContext)
        );
    }

    #[test]
    fn validate_rejects_empty_answer() {
        assert_eq!(
            validate_input(input("q", &["c"], "")),
            Err(ValidationError::EmptyAnswer)
        );
    }

    #[test]
    fn validate_rejects_empty_chunk() {
        assert_eq!(
            validate_input(input("q", &["c", "  "], "a")),
            Err(ValidationError::EmptyChunk { index: 1 })
        );
    }

    #[test]
    fn penalty_roundtrips_exactly() {
        for p in [Penalty::Zero, Penalty::Half, Penalty::One] {
            let json = serde_json::to_string(&p).unwrap();
            let back: Penalty = serde_json::from_str(&json).unwrap();
            assert_eq!(p, back);
        }
        assert!(serde_json::from_str::<Penalty>("0.25").is_err());
    }

    #[test]
    fn usage_totals_track_stage_sums() {
        let mut u = UsageStats::default();
        u.record(Stage::Verify, 10, 5);
        assert_eq!(u.verify, StageUsage { calls: 1, prompt_tokens: 10, completion_tokens: 5 });
        assert_eq!(u.total, u.verify);
        u.record(Stage::Decompose, 3, 2);
        u.record(Stage::Verify, 1, 0);
        assert_eq!(u.total.calls, 3);
        assert_eq!(u.total.prompt_tokens, 14);
        assert_eq!(u.total.completion_tokens, 7);
    }

    #[test]
    fn zero_token_record_counts_the_call() {
        let mut u = UsageStats::default();
        u.record(Stage::Mutate, 0, 0);
        assert_eq!(u.mutate.calls, 1);
        assert_eq!(u.total_tokens(), 0);
    }

    #[test]
    fn config_warns_on_inverted_thresholds() {
        let mut cfg = RunConfig {
            decomposition_model: "m".into(),
            generation_model: "m".into(),
            verifier: VerifierSpec::Single("m".into()),
            n_variants: 2,
            temperature: 0.0,
            threshold_general: 0.3,
            threshold_identity: 0.5,
            escalation_threshold: 0.8,
            seed: 0,
            fallback_single_factoid: false,
        };
        assert_eq!(cfg.validate().unwrap().len(), 1);
        cfg.threshold_identity = 0.3;
        cfg.threshold_general = 0.5;
        assert!(cfg.validate().unwrap().is_empty());
        cfg.n_variants = 0;
        assert_eq!(cfg.validate(), Err(ConfigError::ZeroVariants));
    }

    #[test]
    fn verifier_spec_serializes_both_shapes() {
        let s: VerifierSpec = serde_json::from_str("\"gpt-x\"").unwrap();
        assert_eq!(s.members(), vec!["gpt-x"]);
        let e: VerifierSpec = serde_json::from_str(r#"{"ensemble":["a","b"]}"#).unwrap();
        assert_eq!(e.members(), vec!["a", "b"]);
    }
}

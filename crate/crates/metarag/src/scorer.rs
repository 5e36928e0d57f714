//! Step 4: verdicts -> penalties, factoid scores, response score, flag.

use thiserror::Error;

use crate::model::{MutationKind, Penalty, VerdictDecision};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScoreError {
    #[error("no penalties to average")]
    NoPenalties,
    #[error("no factoid scores to aggregate")]
    NoFactoids,
}

/// The six-cell penalty table: correct entailment of a synonym and correct
/// contradiction of an antonym cost nothing, the opposite costs 1, and an
/// undecided verdict costs 0.5 either way.
pub fn penalty(decision: VerdictDecision, kind: MutationKind) -> Penalty {
    use MutationKind::*;
    use VerdictDecision::*;
    match (decision, kind) {
        (Yes, Synonym) => Penalty::Zero,
        (NotSure, Synonym) => Penalty::Half,
        (No, Synonym) => Penalty::One,
        (Yes, Antonym) => Penalty::One,
        (NotSure, Antonym) => Penalty::Half,
        (No, Antonym) => Penalty::Zero,
    }
}

/// S_i: mean penalty over the factoid's verified mutations. On a mutation
/// shortfall the denominator is the number of penalties actually obtained;
/// missing slots are never padded.
pub fn factoid_score(
    syn_penalties: &[Penalty],
    ant_penalties: &[Penalty],
) -> Result<f64, ScoreError> {
    let count = syn_penalties.len() + ant_penalties.len();
    if count == 0 {
        return Err(ScoreError::NoPenalties);
    }
    let sum: f64 = syn_penalties
        .iter()
        .chain(ant_penalties)
        .map(|p| p.value())
        .sum();
    Ok(sum / count as f64)
}

/// H: the maximum factoid score, so one severe hallucination dominates.
pub fn response_score(factoid_scores: &[f64]) -> Result<f64, ScoreError> {
    if factoid_scores.is_empty() {
        return Err(ScoreError::NoFactoids);
    }
    Ok(factoid_scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
}

/// Flag rule: flagged iff h >= tau (greater-or-equal at exact equality).
pub fn classify(h: f64, tau: f64) -> bool {
    h >= tau
}

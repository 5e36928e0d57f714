//! Step 3: check each mutated factoid against the retrieved context,
//! returning Yes / No / Not sure; single-model or ensemble.

use std::sync::Arc;

use thiserror::Error;

use crate::gateway::{
    ensemble_complete, ChatBackend, CompletionRequest, GatewayError, VERIFY_MAX_TOKENS,
};
use crate::model::{MutatedFactoid, Stage, UsageStats, Verdict, VerdictDecision};
use crate::prompts;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("backend failure during verification: {0}")]
    Backend(#[from] GatewayError),
    #[error("all ensemble members failed")]
    AllMembersFailed,
}

fn verification_request(variant: &MutatedFactoid, context: &[String], seed: u64) -> CompletionRequest {
    let template = prompts::verify_template();
    CompletionRequest {
        system_prompt: template.system_prompt.clone(),
        user_prompt: template.render_user(&[
            ("context", &prompts::render_context(context)),
            ("claim", &variant.text),
        ]),
        // Verification always runs at temperature 0.
        temperature: 0.0,
        max_tokens: VERIFY_MAX_TOKENS,
        seed: Some(seed),
    }
}

/// Verifies one variant against the context with a single backend.
pub fn verify(
    variant: &MutatedFactoid,
    context: &[String],
    backend: &dyn ChatBackend,
    seed: u64,
    usage: &mut UsageStats,
) -> Result<Verdict, VerifyError> {
    assert!(!context.is_empty(), "context must be non-empty");
    let request = verification_request(variant, context, seed);
    let result = backend.complete(&request)?;
    usage.record(Stage::Verify, result.prompt_tokens, result.completion_tokens);
    Ok(parse_verdict(&result.text))
}

/// Maps raw model output onto the three-valued verdict: case-insensitive
/// match on the leading token; anything unrecognized becomes NotSure with the
/// parse failure annotated.
pub fn parse_verdict(raw: &str) -> Verdict {
    let normalized = raw.trim().to_lowercase();
    let head: String = normalized
        .chars()
        .take_while(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    let head = head.trim();
    // "not sure" variants first so the bare "no" prefix cannot shadow them.
    let decision = if head.starts_with("not sure")
        || head.starts_with("notsure")
        || head.starts_with("unsure")
    {
        Some(VerdictDecision::NotSure)
    } else if head.starts_with("yes") {
        Some(VerdictDecision::Yes)
    } else if head.starts_with("no") || normalized.starts_with("no") {
        Some(VerdictDecision::No)
    } else {
        None
    };
    match decision {
        Some(decision) => Verdict { decision, raw_response: raw.to_string(), unparseable: false },
        None => Verdict {
            decision: VerdictDecision::NotSure,
            raw_response: raw.to_string(),
            unparseable: true,
        },
    }
}

/// Ensemble verification: strict majority over member verdicts; no strict
/// majority -> NotSure. Failed members are excluded from the vote; if every
/// member fails the call errors.
pub fn ensemble_verify(
    variant: &MutatedFactoid,
    context: &[String],
    members: &[Arc<dyn ChatBackend>],
    seed: u64,
    usage: &mut UsageStats,
) -> Result<Verdict, VerifyError> {
    assert!(!members.is_empty(), "ensemble needs at least one member");
    let request = verification_request(variant, context, seed);
    let results = ensemble_complete(members, &request);
    let mut verdicts = Vec::new();
    let mut failed = Vec::new();
    for (member, result) in results {
        match result {
            Ok(result) => {
                usage.record(Stage::Verify, result.prompt_tokens, result.completion_tokens);
                verdicts.push((member, parse_verdict(&result.text)));
            }
            Err(err) => failed.push((member, err)),
        }
    }
    if verdicts.is_empty() {
        return Err(VerifyError::AllMembersFailed);
    }
    Ok(aggregate_verdicts(&verdicts, &failed))
}

/// Strict-majority aggregation, invariant under member permutation.
fn aggregate_verdicts(
    verdicts: &[(String, Verdict)],
    failed: &[(String, GatewayError)],
) -> Verdict {
    let total = verdicts.len();
    let count = |d: VerdictDecision| verdicts.iter().filter(|(_, v)| v.decision == d).count();
    let tally = [
        (VerdictDecision::Yes, count(VerdictDecision::Yes)),
        (VerdictDecision::No, count(VerdictDecision::No)),
        (VerdictDecision::NotSure, count(VerdictDecision::NotSure)),
    ];
    let decision = tally
        .iter()
        .find(|(_, c)| 2 * c > total)
        .map(|(d, _)| *d)
        .unwrap_or(VerdictDecision::NotSure);
    let mut raw = format!(
        "ensemble vote: yes={} no={} not_sure={} of {}",
        tally[0].1, tally[1].1, tally[2].1, total
    );
    for (member, err) in failed {
        raw.push_str(&format!("; member {member} failed: {err}"));
    }
    Verdict { decision, raw_response: raw, unparseable: false }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::TripleWorldMock;
    use std::collections::BTreeMap;

    fn world() -> TripleWorldMock {
        TripleWorldMock::new(
            BTreeMap::from([("p".to_string(), vec!["p1".to_string()])]),
            BTreeMap::from([("p".to_string(), vec!["np".to_string()])]),
        )
    }

    fn variant(text: &str, kind: crate::model::MutationKind) -> MutatedFactoid {
        MutatedFactoid { parent_index: 1, variant_index: 1, kind, text: text.to_string() }
    }

    #[test]
    fn parse_verdict_prefix_rules() {
        assert_eq!(parse_verdict("Yes, the context states this.").decision, VerdictDecision::Yes);
        assert_eq!(parse_verdict("NOT SURE").decision, VerdictDecision::NotSure);
        assert!(!parse_verdict("NOT SURE").unparseable);
        assert_eq!(parse_verdict("No.").decision, VerdictDecision::No);
        let fallback = parse_verdict("The claim is partially supported");
        assert_eq!(fallback.decision, VerdictDecision::NotSure);
        assert!(fallback.unparseable);
    }

    #[test]
    fn parse_verdict_is_total() {
        for raw in ["", "???", "ja", "maybe yes", "unsure about this", "Notsure"] {
            let v = parse_verdict(raw);
            assert!(matches!(
                v.decision,
                VerdictDecision::Yes | VerdictDecision::No | VerdictDecision::NotSure
            ));
        }
    }

    #[test]
    fn mock_entailment_and_contradiction() {
        use crate::model::MutationKind::*;
        let w = world();
        let ctx = vec!["a|p|b".to_string()];
        let mut usage = UsageStats::default();
        let yes = verify(&variant("a|p1|b", Synonym), &ctx, &w, 0, &mut usage).unwrap();
        assert_eq!(yes.decision, VerdictDecision::Yes);
        let no = verify(&variant("a|np|b", Antonym), &ctx, &w, 0, &mut usage).unwrap();
        assert_eq!(no.decision, VerdictDecision::No);
        let unsure = verify(&variant("x|p|y", Synonym), &ctx, &w, 0, &mut usage).unwrap();
        assert_eq!(unsure.decision, VerdictDecision::NotSure);
        assert_eq!(usage.verify.calls, 3);
    }

    fn verdict(d: VerdictDecision) -> Verdict {
        Verdict { decision: d, raw_response: String::new(), unparseable: false }
    }

    #[test]
    fn majority_vote_rules() {
        use VerdictDecision::*;
        let vote = |ds: &[VerdictDecision]| {
            let vs: Vec<_> =
                ds.iter().map(|d| ("m".to_string(), verdict(*d))).collect();
            aggregate_verdicts(&vs, &[]).decision
        };
        assert_eq!(vote(&[Yes, Yes, No, NotSure]), NotSure); // 2 of 4, not strict
        assert_eq!(vote(&[Yes, Yes, Yes, No]), Yes);
        assert_eq!(vote(&[No]), No);
        assert_eq!(vote(&[NotSure, NotSure, Yes]), NotSure);
    }

    #[test]
    fn vote_is_permutation_invariant() {
        use VerdictDecision::*;
        let base = [Yes, Yes, Yes, No];
        let perms = [[Yes, Yes, Yes, No], [No, Yes, Yes, Yes], [Yes, No, Yes, Yes]];
        let vote = |ds: &[VerdictDecision]| {
            let vs: Vec<_> = ds.iter().map(|d| ("m".to_string(), verdict(*d))).collect();
            aggregate_verdicts(&vs, &[]).decision
        };
        for p in perms {
            assert_eq!(vote(&p), vote(&base));
        }
    }
}

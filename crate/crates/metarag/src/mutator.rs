//! Step 2: N synonym and N antonym variants per factoid via prompted
//! generation.

use thiserror::Error;

use crate::decomposer::parse_factoid_lines;
use crate::gateway::{ChatBackend, CompletionRequest, GatewayError, GENERATION_MAX_TOKENS};
use crate::model::{Factoid, MutatedFactoid, MutationKind, Stage, UsageStats};
use crate::prompts;

#[derive(Debug, Error)]
pub enum MutateError {
    #[error("backend failure during mutation: {0}")]
    Backend(#[from] GatewayError),
}

/// Outcome of one relation's generation for one factoid.
pub struct MutationBatch {
    pub variants: Vec<MutatedFactoid>,
    /// True when fewer than the requested n variants were obtained after the
    /// retry; scoring proceeds over what was obtained.
    pub shortfall: bool,
}

/// Generates up to `n` variants of `factoid` under `kind`. Over-production is
/// truncated; under-production gets one retry (with a perturbed seed) before
/// being reported as a shortfall.
#[allow(clippy::too_many_arguments)]
pub fn generate_mutations(
    factoid: &Factoid,
    query: &str,
    n: usize,
    kind: MutationKind,
    backend: &dyn ChatBackend,
    temperature: f64,
    seed: u64,
    usage: &mut UsageStats,
) -> Result<MutationBatch, MutateError> {
    assert!(n >= 1, "n must be >= 1");
    let template = prompts::mutation_template(kind);
    let n_str = n.to_string();
    let vars: [(&str, &str); 3] =
        [("factoid", &factoid.text), ("query", query), ("n", &n_str)];
    let make_request = |seed: u64| CompletionRequest {
        system_prompt: template.render_system(&vars),
        user_prompt: template.render_user(&vars),
        temperature,
        max_tokens: GENERATION_MAX_TOKENS,
        seed: Some(seed),
    };

    let mut lines = {
        let result = backend.complete(&make_request(seed))?;
        usage.record(Stage::Mutate, result.prompt_tokens, result.completion_tokens);
        parse_mutation_lines(&result.text, n)
    };
    if lines.len() < n {
        let result = backend.complete(&make_request(seed.wrapping_add(1)))?;
        usage.record(Stage::Mutate, result.prompt_tokens, result.completion_tokens);
        let retry_lines = parse_mutation_lines(&result.text, n);
        if retry_lines.len() > lines.len() {
            lines = retry_lines;
        }
    }
    let shortfall = lines.len() < n;
    let variants = lines
        .into_iter()
        .enumerate()
        .map(|(j, text)| MutatedFactoid {
            parent_index: factoid.index,
            variant_index: j + 1,
            kind,
            text,
        })
        .collect();
    Ok(MutationBatch { variants, shortfall })
}

/// Same line cleaning as factoid parsing, truncated to `expected` when the
/// model over-produces.
pub fn parse_mutation_lines(raw: &str, expected: usize) -> Vec<String> {
    let mut lines = parse_factoid_lines(raw);
    lines.truncate(expected);
    lines
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::TripleWorldMock;
    use std::collections::BTreeMap;

    fn world() -> TripleWorldMock {
        TripleWorldMock::new(
            BTreeMap::from([("p".to_string(), vec!["p1".to_string(), "p2".to_string()])]),
            BTreeMap::from([("p".to_string(), vec!["np".to_string()])]),
        )
    }

    fn factoid(text: &str) -> Factoid {
        Factoid { index: 1, text: text.to_string(), answer_span: None }
    }

    #[test]
    fn truncates_overproduction() {
        assert_eq!(parse_mutation_lines("1. v1\n2. v2\n3. v3", 2), vec!["v1", "v2"]);
    }

    #[test]
    fn keeps_underproduction_for_caller() {
        assert_eq!(parse_mutation_lines("v1", 2), vec!["v1"]);
        assert!(parse_mutation_lines("", 1).is_empty());
    }

    #[test]
    fn synonym_mutations_follow_mock_table() {
        let mut usage = UsageStats::default();
        let batch = generate_mutations(
            &factoid("a|p|b"),
            "q",
            2,
            MutationKind::Synonym,
            &world(),
            0.0,
            7,
            &mut usage,
        )
        .unwrap();
        assert!(!batch.shortfall);
        let texts: Vec<_> = batch.variants.iter().map(|v| v.text.as_str()).collect();
        assert_eq!(texts, vec!["a|p1|b", "a|p2|b"]);
        assert!(batch.variants.iter().all(|v| v.kind == MutationKind::Synonym));
        assert_eq!(usage.mutate.calls, 1);
    }

    #[test]
    fn antonym_mutations_follow_mock_table() {
        let mut usage = UsageStats::default();
        let batch = generate_mutations(
            &factoid("a|p|b"),
            "q",
            1,
            MutationKind::Antonym,
            &world(),
            0.0,
            7,
            &mut usage,
        )
        .unwrap();
        assert_eq!(batch.variants[0].text, "a|np|b");
        assert_eq!(batch.variants[0].variant_index, 1);
    }

    #[test]
    fn mock_mutations_are_deterministic() {
        let w = world();
        let run = || {
            let mut usage = UsageStats::default();
            generate_mutations(
                &factoid("a|p|b"),
                "q",
                2,
                MutationKind::Synonym,
                &w,
                0.0,
                42,
                &mut usage,
            )
            .unwrap()
            .variants
        };
        assert_eq!(run(), run());
    }
}

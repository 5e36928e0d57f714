//! Frozen prompt templates shipped as text assets.
//!
//! Each asset holds a system prompt and a user template separated by a
//! `===USER===` line. User templates use `{name}` placeholders.

use crate::model::MutationKind;

pub const DECOMPOSE: &str = include_str!("../assets/prompts/decompose.txt");
pub const MUTATE_SYNONYM: &str = include_str!("../assets/prompts/mutate_synonym.txt");
pub const MUTATE_ANTONYM: &str = include_str!("../assets/prompts/mutate_antonym.txt");
pub const VERIFY: &str = include_str!("../assets/prompts/verify.txt");

const SECTION_SEPARATOR: &str = "===USER===";

/// A two-part chat prompt template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub system_prompt: String,
    pub user_template: String,
}

impl PromptTemplate {
    /// Parses an asset; panics on a malformed asset since these are
    /// compile-time embedded and covered by tests.
    pub fn parse(asset: &str) -> Self {
        let (system, user) = asset
            .split_once(SECTION_SEPARATOR)
            .expect("prompt asset missing ===USER=== separator");
        PromptTemplate {
            system_prompt: system.trim().to_string(),
            user_template: user.trim_start_matches('\n').trim_end().to_string(),
        }
    }

    /// Substitutes `{name}` placeholders in the user template.
    pub fn render_user(&self, vars: &[(&str, &str)]) -> String {
        let mut out = self.user_template.clone();
        for (name, value) in vars {
            out = out.replace(&format!("{{{name}}}"), value);
        }
        out
    }

    pub fn render_system(&self, vars: &[(&str, &str)]) -> String {
        let mut out = self.system_prompt.clone();
        for (name, value) in vars {
            out = out.replace(&format!("{{{name}}}"), value);
        }
        out
    }
}

pub fn decompose_template() -> PromptTemplate {
    PromptTemplate::parse(DECOMPOSE)
}

pub fn mutation_template(kind: MutationKind) -> PromptTemplate {
    match kind {
        MutationKind::Synonym => PromptTemplate::parse(MUTATE_SYNONYM),
        MutationKind::Antonym => PromptTemplate::parse(MUTATE_ANTONYM),
    }
}

pub fn verify_template() -> PromptTemplate {
    PromptTemplate::parse(VERIFY)
}

/// Renders context chunks with 1-based chunk ids for the verification prompt.
pub fn render_context(chunks: &[String]) -> String {
    chunks
        .iter()
        .enumerate()
        .map(|(i, c)| format!("[chunk {}]\n{}", i + 1, c))
        .collect::<Vec<_>>()
        .join("\n")
}

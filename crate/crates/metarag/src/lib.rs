//! Reference-free, black-box hallucination detection for RAG answers.
//!
//! An answer is decomposed into atomic factoids, each factoid is perturbed
//! with synonym and antonym mutations, every mutation is verified against the
//! retrieved context through a pluggable chat-completion gateway, and the
//! verdicts are aggregated into factoid- and response-level hallucination
//! scores with topic-aware deployment policies on top.

pub mod decomposer;
pub mod eval;
pub mod gateway;
pub mod model;
pub mod mutator;
pub mod pipeline;
pub mod policy;
pub mod prompts;
pub mod scorer;
pub mod verifier;

pub use model::{
    DetectionInput, DetectionReport, Factoid, FactoidScore, MutatedFactoid, MutationKind, Penalty,
    RunConfig, UsageStats, Verdict, VerdictDecision,
};
pub use pipeline::Detector;

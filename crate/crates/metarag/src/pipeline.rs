//! End-to-end orchestration: decompose -> mutate -> verify -> score ->
//! policy -> report.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use thiserror::Error;

use crate::decomposer::{self, DecomposeError};
use crate::gateway::{BackendSpec, ChatBackend, GatewayError, InFlightLimiter, DEFAULT_IN_FLIGHT};
use crate::model::{
    validate_input, ConfigError, DetectionInput, DetectionReport, Factoid, FactoidScore,
    MutatedFactoid, MutationKind, PenaltyEntry, RunConfig, UsageStats, ValidationError,
};
use crate::mutator::{self, MutateError, MutationBatch};
use crate::policy::{self, AuditRecord, AuditSink, TopicRuleSet};
use crate::scorer::{self, ScoreError};
use crate::verifier::{self, VerifyError};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Decompose(#[from] DecomposeError),
    #[error(transparent)]
    Mutate(#[from] MutateError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Backend(#[from] GatewayError),
    #[error("audit append failed: {0}")]
    Audit(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Resolved backends for the three pipeline stages. The verify list has one
/// entry for a single-model verifier and several for an ensemble.
pub struct Backends {
    pub decompose: Arc<dyn ChatBackend>,
    pub mutate: Arc<dyn ChatBackend>,
    pub verify: Vec<Arc<dyn ChatBackend>>,
}

impl Backends {
    /// One backend serving all stages (the usual mock-world setup).
    pub fn uniform(backend: Arc<dyn ChatBackend>) -> Self {
        Backends {
            decompose: Arc::clone(&backend),
            mutate: Arc::clone(&backend),
            verify: vec![backend],
        }
    }

    /// Resolves stage backends from per-model specs keyed by model id.
    pub fn resolve(
        config: &RunConfig,
        specs: &BTreeMap<String, BackendSpec>,
    ) -> Result<Self, GatewayError> {
        let lookup = |model: &str| -> Result<Arc<dyn ChatBackend>, GatewayError> {
            specs
                .get(model)
                .ok_or_else(|| GatewayError::InvalidSpec(format!("no backend spec for model {model}")))?
                .resolve()
        };
        Ok(Backends {
            decompose: lookup(&config.decomposition_model)?,
            mutate: lookup(&config.generation_model)?,
            verify: config
                .verifier
                .members()
                .iter()
                .map(|m| lookup(m))
                .collect::<Result<Vec<_>, _>>()?,
        })
    }
}

pub struct Detector {
    config: RunConfig,
    backends: Backends,
    rules: TopicRuleSet,
    limiter: Arc<InFlightLimiter>,
    parallelism: usize,
    audit: Option<Arc<AuditSink>>,
}

impl Detector {
    pub fn new(
        config: RunConfig,
        backends: Backends,
        rules: TopicRuleSet,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Detector {
            config,
            backends,
            rules,
            limiter: Arc::new(InFlightLimiter::new(DEFAULT_IN_FLIGHT)),
            parallelism: DEFAULT_IN_FLIGHT,
            audit: None,
        })
    }

    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        assert!(parallelism >= 1);
        self.parallelism = parallelism;
        self
    }

    pub fn with_in_flight_bound(mut self, bound: usize) -> Self {
        self.limiter = Arc::new(InFlightLimiter::new(bound));
        self
    }

    pub fn with_audit(mut self, sink: Arc<AuditSink>) -> Self {
        self.audit = Some(sink);
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn rules(&self) -> &TopicRuleSet {
        &self.rules
    }

    /// Clone of this detector with an adjusted config, sharing backends is
    /// not possible across the Arc-less Backends, so only scalar config
    /// fields may change; used by the service override path.
    pub fn with_config(&self, config: RunConfig) -> Result<Detector, ConfigError> {
        config.validate()?;
        Ok(Detector {
            config,
            backends: Backends {
                decompose: Arc::clone(&self.backends.decompose),
                mutate: Arc::clone(&self.backends.mutate),
                verify: self.backends.verify.iter().map(Arc::clone).collect(),
            },
            rules: TopicRuleSet::new(self.rules.rules().to_vec())
                .expect("existing rules revalidate"),
            limiter: Arc::clone(&self.limiter),
            parallelism: self.parallelism,
            audit: self.audit.clone(),
        })
    }

    /// Runs the full detection pipeline for one input.
    pub fn detect(&self, input: &DetectionInput) -> Result<DetectionReport, DetectError> {
        let input = validate_input(input.clone())?;
        let started = Instant::now();
        let mut usage = UsageStats::default();

        let decomposition =
            decomposer::decompose(&input.answer, &*self.backends.decompose, &self.config, &mut usage)?;

        // Phase 1: all mutations before any verification.
        let mut planned: Vec<(Factoid, MutationBatch, MutationBatch)> = Vec::new();
        for factoid in decomposition.factoids {
            let syn = self.generate(&factoid, &input.query, MutationKind::Synonym, &mut usage)?;
            let ant = self.generate(&factoid, &input.query, MutationKind::Antonym, &mut usage)?;
            planned.push((factoid, syn, ant));
        }

        // Phase 2: verification fan-out, joined by (parent, kind, variant)
        // key so completion order never matters.
        let jobs: Vec<&MutatedFactoid> = planned
            .iter()
            .flat_map(|(_, syn, ant)| syn.variants.iter().chain(ant.variants.iter()))
            .collect();
        let outcomes = self.verify_all(&jobs, &input.context);
        let mut verdicts = BTreeMap::new();
        let mut verify_usage = UsageStats::default();
        for (key, outcome) in outcomes {
            let (verdict, delta) = outcome;
            merge_usage(&mut verify_usage, &delta);
            verdicts.insert(key, verdict);
        }
        merge_usage(&mut usage, &verify_usage);

        // Phase 3: scoring.
        let mut factoid_scores = Vec::new();
        for (factoid, syn, ant) in &planned {
            let mut entries = Vec::new();
            let mut syn_penalties = Vec::new();
            let mut ant_penalties = Vec::new();
            let mut verify_failures = false;
            for variant in syn.variants.iter().chain(ant.variants.iter()) {
                let key = (variant.parent_index, variant.kind, variant.variant_index);
                match verdicts.get(&key) {
                    Some(Ok(verdict)) => {
                        let penalty = scorer::penalty(verdict.decision, variant.kind);
                        match variant.kind {
                            MutationKind::Synonym => syn_penalties.push(penalty),
                            MutationKind::Antonym => ant_penalties.push(penalty),
                        }
                        entries.push(PenaltyEntry {
                            parent_index: variant.parent_index,
                            variant_index: variant.variant_index,
                            kind: variant.kind,
                            variant_text: variant.text.clone(),
                            verdict: verdict.clone(),
                            penalty,
                        });
                    }
                    _ => verify_failures = true,
                }
            }
            let score = scorer::factoid_score(&syn_penalties, &ant_penalties)?;
            let expected = 2 * self.config.n_variants;
            factoid_scores.push(FactoidScore {
                index: factoid.index,
                text: factoid.text.clone(),
                answer_span: factoid.answer_span,
                score,
                under_sampled: syn.shortfall
                    || ant.shortfall
                    || verify_failures
                    || entries.len() < expected,
                penalties: entries,
            });
        }
        let scores: Vec<f64> = factoid_scores.iter().map(|f| f.score).collect();
        let response_score = scorer::response_score(&scores)?;

        // Phase 4: policy.
        let topics = policy::tag_topics(&input.query, &input.context, &self.rules);
        let threshold = policy::select_threshold(&topics, &self.rules, &self.config);
        let flagged = scorer::classify(response_score, threshold);
        let action = policy::decide_action(
            response_score,
            threshold,
            &topics,
            &self.rules,
            &factoid_scores,
            self.config.escalation_threshold,
        );

        let report = DetectionReport {
            schema_version: "1".to_string(),
            input,
            factoids: factoid_scores,
            response_score,
            threshold_used: threshold,
            flagged,
            topics,
            action,
            usage,
            latency_ms: started.elapsed().as_millis() as u64,
            fallback_used: decomposition.fallback_used,
        };

        if let Some(sink) = &self.audit {
            sink.append(&AuditRecord::from_report(&report, &self.config))
                .map_err(|e| DetectError::Audit(e.to_string()))?;
        }
        Ok(report)
    }

    /// Runs detection over many inputs; reports come back in input order and
    /// per-input failures are captured in place.
    pub fn detect_batch(
        &self,
        inputs: &[DetectionInput],
        parallelism: usize,
    ) -> Vec<Result<DetectionReport, DetectError>> {
        assert!(parallelism >= 1);
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<DetectionReport, DetectError>>>> =
            Mutex::new((0..inputs.len()).map(|_| None).collect());
        let workers = parallelism.min(inputs.len().max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= inputs.len() {
                        break;
                    }
                    let result = self.detect(&inputs[i]);
                    slots.lock().unwrap()[i] = Some(result);
                });
            }
        });
        slots
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|s| s.expect("batch slot filled"))
            .collect()
    }

    fn generate(
        &self,
        factoid: &Factoid,
        query: &str,
        kind: MutationKind,
        usage: &mut UsageStats,
    ) -> Result<MutationBatch, MutateError> {
        mutator::generate_mutations(
            factoid,
            query,
            self.config.n_variants,
            kind,
            &*self.backends.mutate,
            self.config.temperature,
            self.config.seed,
            usage,
        )
    }

    /// Parallel verification over all variants, bounded by the configured
    /// worker count and the gateway's in-flight limiter.
    #[allow(clippy::type_complexity)]
    fn verify_all(
        &self,
        variants: &[&MutatedFactoid],
        context: &[String],
    ) -> Vec<((usize, MutationKind, usize), (Result<crate::model::Verdict, VerifyError>, UsageStats))>
    {
        let next = AtomicUsize::new(0);
        type Keyed = (
            (usize, MutationKind, usize),
            (Result<crate::model::Verdict, VerifyError>, UsageStats),
        );
        let slots: Mutex<Vec<Option<Keyed>>> =
            Mutex::new((0..variants.len()).map(|_| None).collect());
        let workers = self.parallelism.min(variants.len().max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= variants.len() {
                        break;
                    }
                    let variant = variants[i];
                    let key = (variant.parent_index, variant.kind, variant.variant_index);
                    let mut delta = UsageStats::default();
                    let outcome = {
                        let _slot = self.limiter.acquire();
                        if self.backends.verify.len() == 1 {
                            verifier::verify(
                                variant,
                                context,
                                &*self.backends.verify[0],
                                self.config.seed,
                                &mut delta,
                            )
                        } else {
                            verifier::ensemble_verify(
                                variant,
                                context,
                                &self.backends.verify,
                                self.config.seed,
                                &mut delta,
                            )
                        }
                    };
                    slots.lock().unwrap()[i] = Some((key, (outcome, delta)));
                });
            }
        });
        slots
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|s| s.expect("verify slot filled"))
            .collect()
    }
}

fn merge_usage(into: &mut UsageStats, delta: &UsageStats) {
    for (dst, src) in [
        (&mut into.decompose, &delta.decompose),
        (&mut into.mutate, &delta.mutate),
        (&mut into.verify, &delta.verify),
        (&mut into.total, &delta.total),
    ] {
        dst.calls += src.calls;
        dst.prompt_tokens += src.prompt_tokens;
        dst.completion_tokens += src.completion_tokens;
    }
}

/// Zeroes wall-clock fields so reports can be compared for semantic equality.
pub fn redact_timing(report: &mut DetectionReport) {
    report.latency_ms = 0;
}

//! Detector settings file: a run config plus the backend wiring for every
//! model id it references.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use metarag::eval::{parse_config_string, AliasMap};
use metarag::gateway::BackendSpec;
use metarag::model::{RunConfig, VerifierSpec};
use metarag::pipeline::{Backends, Detector};
use metarag::policy::{AuditSink, TopicRuleSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSettings {
    pub run: RunConfig,
    /// model id -> backend wiring; every model named in `run` must appear.
    pub backends: BTreeMap<String, BackendSpec>,
    /// Append-only JSONL audit log; absent disables auditing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit_log: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<usize>,
}

impl DetectorSettings {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading settings file {}", path.display()))?;
        let settings: DetectorSettings = serde_json::from_str(&text)
            .with_context(|| format!("parsing settings file {}", path.display()))?;
        Ok(settings)
    }

    /// Builds the wired-up detector; config warnings go to stderr.
    pub fn build(&self, rules: TopicRuleSet) -> anyhow::Result<Detector> {
        for warning in self.run.validate()? {
            eprintln!("warning: {warning}");
        }
        let backends = Backends::resolve(&self.run, &self.backends)?;
        let mut detector = Detector::new(self.run.clone(), backends, rules)?;
        if let Some(parallelism) = self.parallelism {
            detector = detector.with_parallelism(parallelism);
        }
        if let Some(path) = &self.audit_log {
            detector = detector.with_audit(Arc::new(AuditSink::open(path)?));
        }
        Ok(detector)
    }
}

/// Accepts either a settings file path or a bare five-field config string
/// such as "mini/41/multi/2/0". A config string carries no backend wiring,
/// so every referenced model id is bound to an offline mock world.
pub fn resolve_config_arg(config: &str) -> anyhow::Result<DetectorSettings> {
    let path = Path::new(config);
    if path.exists() {
        return DetectorSettings::load(path);
    }
    let fragment = parse_config_string(config, &AliasMap::default_aliases())
        .with_context(|| format!("--config {config:?} is neither a file nor a config string"))?;
    let run = fragment.apply(&RunConfig {
        decomposition_model: String::new(),
        generation_model: String::new(),
        verifier: VerifierSpec::Single(String::new()),
        n_variants: 2,
        temperature: 0.0,
        threshold_general: 0.5,
        threshold_identity: 0.3,
        escalation_threshold: 0.8,
        seed: 0,
        fallback_single_factoid: false,
    });
    let mock = BackendSpec::TripleWorldMock {
        synonyms: BTreeMap::new(),
        antonyms: BTreeMap::new(),
    };
    let mut backends = BTreeMap::new();
    backends.insert(run.decomposition_model.clone(), mock.clone());
    backends.insert(run.generation_model.clone(), mock.clone());
    for member in run.verifier.members() {
        backends.insert(member.to_string(), mock.clone());
    }
    Ok(DetectorSettings { run, backends, audit_log: None, parallelism: None })
}

/// Topic rules from an optional file; the bundled defaults otherwise.
pub fn resolve_rules_arg(rules: Option<&Path>) -> anyhow::Result<TopicRuleSet> {
    match rules {
        Some(path) => Ok(TopicRuleSet::load(path)?),
        None => Ok(TopicRuleSet::default_rules()),
    }
}

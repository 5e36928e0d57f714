//! Evaluation machinery: labeled-dataset ingestion, binary-classification
//! metrics, multi-seed consistency statistics, and Pareto-front analysis over
//! configurations.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DetectionInput, RunConfig, VerifierSpec};
use crate::pipeline::{DetectError, Detector};

pub const DEFAULT_ALIASES: &str = include_str!("../assets/presets/aliases.json");
pub const PAPER26_GRID: &str = include_str!("../assets/presets/paper26.json");

/// One labeled evaluation example; label true = hallucinated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub query: String,
    pub context: Vec<String>,
    pub answer: String,
    pub label: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topics: Option<Vec<String>>,
}

impl EvalRecord {
    pub fn input(&self) -> DetectionInput {
        DetectionInput {
            query: self.query.clone(),
            context: self.context.clone(),
            answer: self.answer.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset file missing: {0}")]
    FileMissing(String),
    #[error("dataset schema error at line {line}: {message}")]
    SchemaError { line: usize, message: String },
    #[error("need at least 2 seeds for a consistency report")]
    TooFewSeeds,
    #[error("unknown metric key: {0}")]
    UnknownMetricKey(String),
    #[error("bad config string, field {field}: {message}")]
    BadConfigString { field: &'static str, message: String },
    #[error("empty record set")]
    NoRecords,
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error("grid file error: {0}")]
    GridInvalid(String),
}

#[derive(Debug)]
pub struct LoadedDataset {
    pub records: Vec<EvalRecord>,
    pub warnings: Vec<String>,
}

/// Reads one `EvalRecord` per JSONL line; a malformed line fails with its
/// line number.
pub fn load_dataset(path: &Path) -> Result<LoadedDataset, EvalError> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| EvalError::FileMissing(path.display().to_string()))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: EvalRecord = serde_json::from_str(line)
            .map_err(|e| EvalError::SchemaError { line: i + 1, message: e.to_string() })?;
        records.push(record);
    }
    let mut warnings = Vec::new();
    if records.is_empty() {
        warnings.push(format!("dataset {} contains no records", path.display()));
    }
    Ok(LoadedDataset { records, warnings })
}

/// Binary-classification summary; positive class = hallucinated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub false_negatives: u64,
    pub mean_latency_ms: f64,
    pub mean_total_tokens: f64,
    /// Record ids whose detection failed; they are excluded from the counts.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded: Vec<String>,
    /// True when no positives were predicted and precision is reported as 0
    /// by convention rather than as an actual ratio.
    #[serde(default)]
    pub precision_undefined: bool,
}

impl MetricsSummary {
    pub fn processed(&self) -> u64 {
        self.tp + self.fp + self.tn + self.false_negatives
    }

    pub fn metric(&self, key: &str) -> Result<f64, EvalError> {
        match key {
            "f1" => Ok(self.f1),
            "precision" => Ok(self.precision),
            "recall" => Ok(self.recall),
            "accuracy" => Ok(self.accuracy),
            "tokens" => Ok(self.mean_total_tokens),
            "latency" => Ok(self.mean_latency_ms),
            other => Err(EvalError::UnknownMetricKey(other.to_string())),
        }
    }
}

/// Runs detection over the records and scores flagged-vs-label.
pub fn evaluate(
    records: &[EvalRecord],
    detector: &Detector,
    parallelism: usize,
) -> Result<MetricsSummary, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let inputs: Vec<DetectionInput> = records.iter().map(|r| r.input()).collect();
    let results = detector.detect_batch(&inputs, parallelism);

    let (mut tp, mut fp, mut tn, mut false_negatives) = (0u64, 0u64, 0u64, 0u64);
    let mut excluded = Vec::new();
    let mut latency_sum = 0u64;
    let mut token_sum = 0u64;
    let mut processed = 0u64;
    for (record, result) in records.iter().zip(results) {
        let report = match result {
            Ok(report) => report,
            Err(_) => {
                excluded.push(record.id.clone());
                continue;
            }
        };
        processed += 1;
        latency_sum += report.latency_ms;
        token_sum += report.usage.total_tokens();
        match (report.flagged, record.label) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => false_negatives += 1,
        }
    }
    let predicted_positive = tp + fp;
    let precision_undefined = predicted_positive == 0;
    let precision = if precision_undefined { 0.0 } else { tp as f64 / predicted_positive as f64 };
    let actual_positive = tp + false_negatives;
    let recall = if actual_positive == 0 { 0.0 } else { tp as f64 / actual_positive as f64 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let accuracy = if processed == 0 { 0.0 } else { (tp + tn) as f64 / processed as f64 };
    Ok(MetricsSummary {
        precision,
        recall,
        f1,
        accuracy,
        tp,
        fp,
        tn,
        false_negatives,
        mean_latency_ms: if processed == 0 { 0.0 } else { latency_sum as f64 / processed as f64 },
        mean_total_tokens: if processed == 0 { 0.0 } else { token_sum as f64 / processed as f64 },
        excluded,
        precision_undefined,
    })
}

/// Mean, sample standard deviation and coefficient of variation for one
/// metric across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub mean: f64,
    pub std: f64,
    /// sigma / mu; 0 when the mean is 0.
    pub cv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, MetricStats>,
}

fn stats(values: &[f64]) -> MetricStats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    // sample (n-1) standard deviation
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    let cv = if mean > 0.0 { std / mean } else { 0.0 };
    MetricStats { mean, std, cv }
}

/// Per-metric mean/std/CV over repeated seeded runs.
pub fn consistency(
    summaries: &[MetricsSummary],
    seeds: &[u64],
) -> Result<ConsistencyReport, EvalError> {
    if summaries.len() < 2 {
        return Err(EvalError::TooFewSeeds);
    }
    let mut metrics = BTreeMap::new();
    for key in ["f1", "precision", "recall", "accuracy", "latency", "tokens"] {
        let values: Vec<f64> = summaries
            .iter()
            .map(|s| s.metric(key).expect("known key"))
            .collect();
        metrics.insert(key.to_string(), stats(&values));
    }
    Ok(ConsistencyReport { seeds: seeds.to_vec(), metrics })
}

/// One grid cell's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigResult {
    pub config_id: String,
    pub config_string: String,
    pub config: RunConfig,
    pub metrics: MetricsSummary,
}

/// The non-dominated subset: a result survives iff no other result has a
/// strictly higher objective at no worse cost. Output sorted by cost
/// ascending.
pub fn pareto_front(
    results: &[ConfigResult],
    objective: &str,
    cost: &str,
) -> Result<Vec<ConfigResult>, EvalError> {
    if results.is_empty() {
        return Ok(Vec::new());
    }
    let points: Vec<(f64, f64)> = results
        .iter()
        .map(|r| Ok((r.metrics.metric(objective)?, r.metrics.metric(cost)?)))
        .collect::<Result<_, EvalError>>()?;
    let mut order: Vec<usize> = (0..results.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .1
            .partial_cmp(&points[b].1)
            .unwrap()
            .then(points[b].0.partial_cmp(&points[a].0).unwrap())
    });
    // A point is kept iff its objective equals the running maximum over all
    // points of cost <= its own (a strictly better cheaper-or-equal point
    // dominates it).
    let mut front = Vec::new();
    let mut i = 0;
    let mut best = f64::NEG_INFINITY;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && points[order[j]].1 == points[order[i]].1 {
            j += 1;
        }
        let group_max = order[i..j]
            .iter()
            .map(|&k| points[k].0)
            .fold(f64::NEG_INFINITY, f64::max);
        best = best.max(group_max);
        for &k in &order[i..j] {
            if points[k].0 == best {
                front.push(results[k].clone());
            }
        }
        i = j;
    }
    Ok(front)
}

/// Alias map resolving config-string fields to model ids or ensembles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AliasMap {
    pub models: BTreeMap<String, String>,
    #[serde(default)]
    pub ensembles: BTreeMap<String, Vec<String>>,
}

impl AliasMap {
    pub fn default_aliases() -> Self {
        serde_json::from_str(DEFAULT_ALIASES).expect("bundled aliases are valid")
    }

    fn resolve_model(&self, alias: &str) -> String {
        self.models.get(alias).cloned().unwrap_or_else(|| alias.to_string())
    }
}

/// Parsed five-field configuration string; alias spellings are kept so the
/// string can be reformatted losslessly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigFragment {
    pub decomposition_alias: String,
    pub decomposition_model: String,
    pub generation_alias: String,
    pub generation_model: String,
    pub verifier_alias: String,
    pub verifier: VerifierSpec,
    pub n_variants: usize,
    pub temperature: f64,
}

impl ConfigFragment {
    /// Applies the five parsed fields on top of a base config.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut config = base.clone();
        config.decomposition_model = self.decomposition_model.clone();
        config.generation_model = self.generation_model.clone();
        config.verifier = self.verifier.clone();
        config.n_variants = self.n_variants;
        config.temperature = self.temperature;
        config
    }
}

/// Parses "decomp/gen/verifier/N/temperature".
pub fn parse_config_string(s: &str, aliases: &AliasMap) -> Result<ConfigFragment, EvalError> {
    let fields: Vec<&str> = s.split('/').collect();
    if fields.len() != 5 {
        return Err(EvalError::BadConfigString {
            field: "shape",
            message: format!("expected 5 slash-separated fields, got {}", fields.len()),
        });
    }
    for (field, name) in fields.iter().zip(["decomposition", "generation", "verifier", "n", "temperature"]) {
        if field.is_empty() {
            return Err(EvalError::BadConfigString {
                field: match name {
                    "decomposition" => "decomposition",
                    "generation" => "generation",
                    "verifier" => "verifier",
                    "n" => "n",
                    _ => "temperature",
                },
                message: "field is empty".to_string(),
            });
        }
    }
    for (alias, field) in [(fields[0], "decomposition"), (fields[1], "generation")] {
        if aliases.ensembles.contains_key(alias) {
            return Err(EvalError::BadConfigString {
                field: if field == "decomposition" { "decomposition" } else { "generation" },
                message: format!("ensemble alias {alias} is not valid for this stage"),
            });
        }
    }
    let verifier = if let Some(members) = aliases.ensembles.get(fields[2]) {
        VerifierSpec::Ensemble {
            ensemble: members.iter().map(|m| aliases.resolve_model(m)).collect(),
        }
    } else {
        VerifierSpec::Single(aliases.resolve_model(fields[2]))
    };
    let n_variants: usize = fields[3].parse().map_err(|e| EvalError::BadConfigString {
        field: "n",
        message: format!("{e}"),
    })?;
    if n_variants == 0 {
        return Err(EvalError::BadConfigString {
            field: "n",
            message: "N must be >= 1".to_string(),
        });
    }
    let temperature: f64 = fields[4].parse().map_err(|e| EvalError::BadConfigString {
        field: "temperature",
        message: format!("{e}"),
    })?;
    if !(0.0..=2.0).contains(&temperature) {
        return Err(EvalError::BadConfigString {
            field: "temperature",
            message: "temperature must be within [0, 2]".to_string(),
        });
    }
    Ok(ConfigFragment {
        decomposition_alias: fields[0].to_string(),
        decomposition_model: aliases.resolve_model(fields[0]),
        generation_alias: fields[1].to_string(),
        generation_model: aliases.resolve_model(fields[1]),
        verifier_alias: fields[2].to_string(),
        verifier,
        n_variants,
        temperature,
    })
}

/// Inverse of `parse_config_string` on the alias spellings.
pub fn format_config_string(fragment: &ConfigFragment) -> String {
    let temperature = if fragment.temperature.fract() == 0.0 {
        format!("{}", fragment.temperature as i64)
    } else {
        format!("{}", fragment.temperature)
    };
    format!(
        "{}/{}/{}/{}/{}",
        fragment.decomposition_alias,
        fragment.generation_alias,
        fragment.verifier_alias,
        fragment.n_variants,
        temperature
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub id: String,
    pub config: String,
    #[serde(default)]
    pub reconstructed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(default)]
    pub note: String,
    pub entries: Vec<GridEntry>,
}

impl GridSpec {
    pub fn paper26() -> Self {
        serde_json::from_str(PAPER26_GRID).expect("bundled grid preset is valid")
    }

    pub fn from_json(json: &str) -> Result<Self, EvalError> {
        serde_json::from_str(json).map_err(|e| EvalError::GridInvalid(e.to_string()))
    }
}

/// Evaluates every grid cell sequentially (per-cell batch parallelism still
/// applies inside the detector factory's detectors).
pub fn run_grid<F>(
    records: &[EvalRecord],
    grid: &GridSpec,
    aliases: &AliasMap,
    base: &RunConfig,
    make_detector: F,
    parallelism: usize,
) -> Result<Vec<ConfigResult>, EvalError>
where
    F: Fn(&RunConfig) -> Result<Detector, EvalError>,
{
    let mut results = Vec::new();
    for entry in &grid.entries {
        let fragment = parse_config_string(&entry.config, aliases)?;
        let config = fragment.apply(base);
        let detector = make_detector(&config)?;
        let metrics = evaluate(records, &detector, parallelism)?;
        results.push(ConfigResult {
            config_id: entry.id.clone(),
            config_string: entry.config.clone(),
            config,
            metrics,
        });
    }
    Ok(results)
}

/// Markdown leaderboard: top-4 per metric, one table per metric.
pub fn render_leaderboard(results: &[ConfigResult]) -> String {
    let mut out = String::from("# Leaderboard\n");
    for (title, key) in [("F1", "f1"), ("Precision", "precision"), ("Recall", "recall")] {
        let mut sorted: Vec<&ConfigResult> = results.iter().collect();
        sorted.sort_by(|a, b| {
            b.metrics
                .metric(key)
                .unwrap()
                .partial_cmp(&a.metrics.metric(key).unwrap())
                .unwrap()
        });
        out.push_str(&format!("\n## Top-4 by {title}\n\n"));
        out.push_str("| ID | Config | F1 | Prec. | Rec. | Acc. |\n");
        out.push_str("|----|--------|----|-------|------|------|\n");
        for r in sorted.iter().take(4) {
            out.push_str(&format!(
                "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
                r.config_id,
                r.config_string,
                r.metrics.f1,
                r.metrics.precision,
                r.metrics.recall,
                r.metrics.accuracy
            ));
        }
    }
    out
}

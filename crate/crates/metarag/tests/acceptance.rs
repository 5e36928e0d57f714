//! Acceptance gate. Each test covers one numbered criterion and prints a
//! single PASS/FAIL line; criterion 11 (CLI/service parity) lives in the CLI
//! crate's test suite.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use metarag::eval::{
    self, consistency, evaluate, format_config_string, parse_config_string, pareto_front,
    AliasMap, ConfigResult, EvalRecord, GridSpec, MetricsSummary,
};
use metarag::gateway::TripleWorldMock;
use metarag::model::{
    DetectionInput, MutationKind, RunConfig, VerdictDecision, VerifierSpec,
};
use metarag::pipeline::{redact_timing, Backends, Detector};
use metarag::policy::{select_threshold, tag_topics, TopicRuleSet};
use metarag::scorer;

fn criterion<F: FnOnce() + std::panic::UnwindSafe>(n: u32, what: &str, body: F) {
    match std::panic::catch_unwind(body) {
        Ok(()) => println!("PASS [{n}/11] {what}"),
        Err(e) => {
            println!("FAIL [{n}/11] {what}");
            std::panic::resume_unwind(e);
        }
    }
}

fn base_config(n: usize, seed: u64) -> RunConfig {
    RunConfig {
        decomposition_model: "mock".into(),
        generation_model: "mock".into(),
        verifier: VerifierSpec::Single("mock".into()),
        n_variants: n,
        temperature: 0.0,
        threshold_general: 0.5,
        threshold_identity: 0.3,
        escalation_threshold: 0.8,
        seed,
        fallback_single_factoid: false,
    }
}

fn world() -> Arc<TripleWorldMock> {
    Arc::new(TripleWorldMock::new(
        BTreeMap::from([("p".to_string(), vec!["p1".to_string(), "p2".to_string()])]),
        BTreeMap::from([("p".to_string(), vec!["np1".to_string(), "np2".to_string()])]),
    ))
}

fn mock_detector(n: usize, seed: u64) -> Detector {
    Detector::new(base_config(n, seed), Backends::uniform(world()), TopicRuleSet::empty()).unwrap()
}

#[test]
fn criterion_01_penalty_table() {
    criterion(1, "penalty table matches the six-cell scheme exactly", || {
        use MutationKind::*;
        use VerdictDecision::*;
        let expected = [
            (Yes, Synonym, 0.0),
            (NotSure, Synonym, 0.5),
            (No, Synonym, 1.0),
            (Yes, Antonym, 1.0),
            (NotSure, Antonym, 0.5),
            (No, Antonym, 0.0),
        ];
        for (decision, kind, value) in expected {
            assert_eq!(scorer::penalty(decision, kind).value(), value);
        }
    });
}

#[test]
fn criterion_02_scoring_equals_straight_line_oracle() {
    criterion(2, "scores match a straight-line recomputation on 1000 random runs", || {
        use MutationKind::*;
        use VerdictDecision::*;
        // The oracle is written from scratch: literal penalty constants, plain
        // loops, a running sum and a running max. It shares nothing with the
        // library implementation.
        let oracle_penalty = |decision: VerdictDecision, kind: MutationKind| -> f64 {
            match (decision, kind) {
                (Yes, Synonym) | (No, Antonym) => 0.0,
                (NotSure, _) => 0.5,
                (No, Synonym) | (Yes, Antonym) => 1.0,
            }
        };
        let decisions = [Yes, No, NotSure];
        let mut rng = StdRng::seed_from_u64(20260824);
        for _ in 0..1000 {
            let m = rng.gen_range(1..=6);
            let n = rng.gen_range(1..=5);
            let mut oracle_h = f64::NEG_INFINITY;
            let mut lib_scores = Vec::new();
            for _ in 0..m {
                let syn_verdicts: Vec<VerdictDecision> =
                    (0..n).map(|_| decisions[rng.gen_range(0..3)]).collect();
                let ant_verdicts: Vec<VerdictDecision> =
                    (0..n).map(|_| decisions[rng.gen_range(0..3)]).collect();

                let mut sum = 0.0;
                for &v in &syn_verdicts {
                    sum += oracle_penalty(v, Synonym);
                }
                for &v in &ant_verdicts {
                    sum += oracle_penalty(v, Antonym);
                }
                let oracle_s = sum / (2 * n) as f64;
                if oracle_s > oracle_h {
                    oracle_h = oracle_s;
                }

                let syn: Vec<_> =
                    syn_verdicts.iter().map(|&v| scorer::penalty(v, Synonym)).collect();
                let ant: Vec<_> =
                    ant_verdicts.iter().map(|&v| scorer::penalty(v, Antonym)).collect();
                let lib_s = scorer::factoid_score(&syn, &ant).unwrap();
                assert!((lib_s - oracle_s).abs() < 1e-12);
                lib_scores.push(lib_s);
            }
            let lib_h = scorer::response_score(&lib_scores).unwrap();
            assert!((lib_h - oracle_h).abs() < 1e-12);
        }
    });
}

#[test]
fn criterion_03_case_study_anchors() {
    criterion(3, "case-study anchor scores 0.92 and 0.5 flag at both thresholds", || {
        // A single severe factoid with S = 0.92 dominates the response.
        let h = scorer::response_score(&[0.12, 0.92, 0.0]).unwrap();
        assert!((h - 0.92).abs() < 1e-12);
        assert!(scorer::classify(h, 0.3));
        assert!(scorer::classify(h, 0.5));

        // The uniformly-unsure case lands at exactly 0.5 and flags at both
        // thresholds, including the exact-equality boundary at 0.5. It is
        // also reproduced end to end: a claim with no supporting or
        // contradicting evidence in context yields S = 0.5.
        let report = mock_detector(2, 0)
            .detect(&DetectionInput {
                query: "q".into(),
                context: vec!["x|q|y".into()],
                answer: "a|p|b.".into(),
            })
            .unwrap();
        assert_eq!(report.response_score, 0.5);
        assert!(scorer::classify(report.response_score, 0.3));
        assert!(scorer::classify(report.response_score, 0.5));
        assert!(report.flagged);
    });
}

#[test]
fn criterion_04_topic_aware_thresholds() {
    criterion(4, "sensitive-topic queries use the 0.3 threshold, generic ones 0.5", || {
        let rules = TopicRuleSet::default_rules();
        let config = base_config(2, 0);

        let cases = [
            ("Is ibuprofen safe during the first trimester of pregnancy?", 0.3),
            ("What happens to asylum seekers whose refugee claims are denied?", 0.3),
            ("What is the boiling point of water at sea level?", 0.5),
        ];
        for (query, expected) in cases {
            let topics = tag_topics(query, &[], &rules);
            let tau = select_threshold(&topics, &rules, &config);
            assert_eq!(tau, expected, "query: {query}");
        }

        // Topic tagging also inspects retrieved context, not just the query.
        let context = vec!["Deportation proceedings begin within 30 days.".to_string()];
        let topics = tag_topics("what happens next?", &context, &rules);
        assert_eq!(select_threshold(&topics, &rules, &config), 0.3);
    });
}

#[test]
fn criterion_05_consistency_cv_anchors() {
    criterion(5, "coefficient-of-variation anchors reproduce to 0.01 pp", || {
        let summary = |f1: f64| MetricsSummary {
            precision: 0.0,
            recall: 0.0,
            f1,
            accuracy: 0.0,
            tp: 0,
            fp: 0,
            tn: 0,
            false_negatives: 0,
            mean_latency_ms: 0.0,
            mean_total_tokens: 0.0,
            excluded: Vec::new(),
            precision_undefined: false,
        };
        // Two-point samples constructed to hit the published mean and sample
        // standard deviation exactly.
        for (mean, std, expected_cv_pct) in [(0.9397, 0.0123, 1.31), (0.9347, 0.0305, 3.26)] {
            let d = std / 2f64.sqrt();
            let summaries = vec![summary(mean + d), summary(mean - d)];
            let report = consistency(&summaries, &[1, 2]).unwrap();
            let f1 = &report.metrics["f1"];
            assert!((f1.mean - mean).abs() < 1e-12);
            assert!((f1.std - std).abs() < 1e-12);
            assert!(
                (f1.cv * 100.0 - expected_cv_pct).abs() < 0.01,
                "cv {} vs expected {}",
                f1.cv * 100.0,
                expected_cv_pct
            );
        }
    });
}

#[test]
fn criterion_06_pareto_front_matches_brute_force() {
    criterion(6, "pareto front matches an O(n^2) dominance oracle on 500 random sets", || {
        let result = |id: String, f1: f64, tokens: f64| ConfigResult {
            config_id: id,
            config_string: "mini/41/41/2/0".to_string(),
            config: base_config(2, 0),
            metrics: MetricsSummary {
                precision: 0.0,
                recall: 0.0,
                f1,
                accuracy: 0.0,
                tp: 0,
                fp: 0,
                tn: 0,
                false_negatives: 0,
                mean_latency_ms: 0.0,
                mean_total_tokens: tokens,
                excluded: Vec::new(),
                precision_undefined: false,
            },
        };
        let mut rng = StdRng::seed_from_u64(6);
        for trial in 0..500 {
            let size = rng.gen_range(1..=30);
            // Discretized values so ties in both axes actually occur.
            let results: Vec<ConfigResult> = (0..size)
                .map(|i| {
                    let f1 = rng.gen_range(0..=20) as f64 * 0.05;
                    let tokens = rng.gen_range(1..=10) as f64 * 10.0;
                    result(format!("{trial}-{i}"), f1, tokens)
                })
                .collect();
            // Brute-force oracle: keep a point iff no other point has a
            // strictly higher objective at no higher cost.
            let oracle: BTreeSet<&str> = results
                .iter()
                .filter(|a| {
                    !results.iter().any(|b| {
                        b.metrics.f1 > a.metrics.f1
                            && b.metrics.mean_total_tokens <= a.metrics.mean_total_tokens
                    })
                })
                .map(|r| r.config_id.as_str())
                .collect();
            let front = pareto_front(&results, "f1", "tokens").unwrap();
            let got: BTreeSet<&str> = front.iter().map(|r| r.config_id.as_str()).collect();
            assert_eq!(got, oracle, "trial {trial}");
            // Output is sorted by cost ascending.
            let costs: Vec<f64> =
                front.iter().map(|r| r.metrics.mean_total_tokens).collect();
            assert!(costs.windows(2).all(|w| w[0] <= w[1]));
        }
    });
}

fn hand_built_dataset() -> Vec<EvalRecord> {
    let record = |id: usize, context: &str, answer: &str, label: bool| EvalRecord {
        id: format!("r{id:02}"),
        query: "q".to_string(),
        context: vec![context.to_string()],
        answer: answer.to_string(),
        label,
        topics: None,
    };
    // Three world situations, each with a known outcome at tau = 0.5:
    //   supported     (context entails the claim)      -> H = 0.0, not flagged
    //   contradicted  (context asserts the antonym)    -> H = 1.0, flagged
    //   no-evidence   (context is about something else) -> H = 0.5, flagged
    // Labels are assigned to produce TP=6, FP=2, TN=10, FN=2.
    let mut records = Vec::new();
    let mut id = 0;
    let mut push = |records: &mut Vec<EvalRecord>, context: &str, answer: &str, label: bool| {
        id += 1;
        records.push(record(id, context, answer, label));
    };
    for _ in 0..4 {
        push(&mut records, "a|np1|b", "a|p|b.", true); // TP: contradicted, labeled bad
    }
    for _ in 0..2 {
        push(&mut records, "x|q|y", "a|p|b.", true); // TP: unsupported, labeled bad
    }
    for _ in 0..2 {
        push(&mut records, "x|q|y", "a|p|b.", false); // FP: unsupported, labeled good
    }
    for _ in 0..10 {
        push(&mut records, "a|p|b", "a|p|b.", false); // TN: supported, labeled good
    }
    for _ in 0..2 {
        push(&mut records, "a|p|b", "a|p|b.", true); // FN: supported, labeled bad
    }
    records
}

#[test]
fn criterion_07_end_to_end_metrics_and_zero_variance() {
    criterion(7, "20-record mock evaluation reproduces the derived confusion matrix", || {
        let records = hand_built_dataset();
        assert_eq!(records.len(), 20);

        let summary = evaluate(&records, &mock_detector(2, 1), 4).unwrap();
        // Hand-derived: TP=6, FP=2, TN=10, FN=2.
        assert_eq!(
            (summary.tp, summary.fp, summary.tn, summary.false_negatives),
            (6, 2, 10, 2)
        );
        assert_eq!(summary.precision, 0.75); // 6 / 8
        assert_eq!(summary.recall, 0.75); // 6 / 8
        assert_eq!(summary.f1, 0.75);
        assert_eq!(summary.accuracy, 0.8); // 16 / 20
        assert!(summary.excluded.is_empty());
        assert!(!summary.precision_undefined);

        // Five seeded runs at temperature 0 are identical, so every
        // classification metric has zero spread.
        let seeds = [1u64, 2, 3, 4, 5];
        let summaries: Vec<MetricsSummary> = seeds
            .iter()
            .map(|&seed| evaluate(&records, &mock_detector(2, seed), 4).unwrap())
            .collect();
        let report = consistency(&summaries, &seeds).unwrap();
        for key in ["f1", "precision", "recall", "accuracy", "tokens"] {
            assert_eq!(report.metrics[key].std, 0.0, "metric {key}");
            assert_eq!(report.metrics[key].cv, 0.0, "metric {key}");
        }
    });
}

#[test]
fn criterion_08_parallelism_does_not_change_reports() {
    criterion(8, "reports are identical at parallelism 1 and 16 over 50 trials", || {
        let answers = [
            "a|p|b.",
            "a|p|b. c|p|d.",
            "a|np1|b. a|p|b. e|p|f.",
            "c|p|d. e|p|f. a|p|b. a|np2|b.",
        ];
        for trial in 0..50u64 {
            let input = DetectionInput {
                query: "q".into(),
                context: vec!["a|p|b".into(), "g|p|h".into()],
                answer: answers[(trial % 4) as usize].into(),
            };
            let mut seq = mock_detector(2, trial)
                .with_parallelism(1)
                .detect(&input)
                .unwrap();
            let mut par = mock_detector(2, trial)
                .with_parallelism(16)
                .detect(&input)
                .unwrap();
            redact_timing(&mut seq);
            redact_timing(&mut par);
            assert_eq!(
                serde_json::to_string(&seq).unwrap(),
                serde_json::to_string(&par).unwrap(),
                "trial {trial}"
            );
        }
    });
}

#[test]
fn criterion_09_config_strings_parse_and_roundtrip() {
    criterion(9, "config strings parse, resolve aliases, and round-trip", || {
        let aliases = AliasMap::default_aliases();

        // Worked example.
        let fragment = parse_config_string("mini/41/multi/2/0", &aliases).unwrap();
        assert_eq!(fragment.decomposition_model, "gpt-4.1-mini");
        assert_eq!(fragment.generation_model, "gpt-4.1");
        assert!(matches!(&fragment.verifier, VerifierSpec::Ensemble { ensemble } if ensemble.len() == 4));
        assert_eq!(fragment.n_variants, 2);
        assert_eq!(fragment.temperature, 0.0);

        // Every entry in the bundled 26-configuration grid parses and
        // round-trips through format/parse unchanged.
        let grid = GridSpec::paper26();
        assert_eq!(grid.entries.len(), 26);
        for entry in &grid.entries {
            let parsed = parse_config_string(&entry.config, &aliases)
                .unwrap_or_else(|e| panic!("{}: {e}", entry.config));
            let formatted = format_config_string(&parsed);
            assert_eq!(formatted, entry.config);
            assert_eq!(parse_config_string(&formatted, &aliases).unwrap(), parsed);
        }

        // Malformed strings are rejected with the offending field named.
        for (bad, field) in [
            ("mini/41/41/0/0", "n"),
            ("mini/41/41/2/9", "temperature"),
            ("mini/41/41/2", "shape"),
            ("multi/41/41/2/0", "decomposition"),
        ] {
            match parse_config_string(bad, &aliases) {
                Err(eval::EvalError::BadConfigString { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected rejection of {bad}, got {other:?}"),
            }
        }
    });
}

#[test]
fn criterion_10_usage_accounting_is_exact() {
    criterion(10, "token totals sum per stage and verify calls equal M x 2N", || {
        for (answer, m) in [("a|p|b.", 1), ("a|p|b. c|p|d.", 2), ("a|p|b. c|p|d. e|p|f.", 3)] {
            for n in [1usize, 2, 3] {
                let report = mock_detector(n, 0)
                    .detect(&DetectionInput {
                        query: "q".into(),
                        context: vec!["a|p|b".into()],
                        answer: answer.into(),
                    })
                    .unwrap();
                let u = &report.usage;
                assert_eq!(u.decompose.calls, 1);
                assert_eq!(u.mutate.calls, 2 * m); // one call per factoid per relation
                assert_eq!(u.verify.calls, m * 2 * n as u64);
                assert_eq!(u.total.calls, u.decompose.calls + u.mutate.calls + u.verify.calls);
                assert_eq!(
                    u.total.prompt_tokens,
                    u.decompose.prompt_tokens + u.mutate.prompt_tokens + u.verify.prompt_tokens
                );
                assert_eq!(
                    u.total.completion_tokens,
                    u.decompose.completion_tokens
                        + u.mutate.completion_tokens
                        + u.verify.completion_tokens
                );
                assert_eq!(
                    u.total_tokens(),
                    u.total.prompt_tokens + u.total.completion_tokens
                );
            }
        }
    });
}

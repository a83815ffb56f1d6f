use std::path::PathBuf;

use opsdesk_core::config::Config;
use opsdesk_core::deepsearch::{flags, StopReason};
use opsdesk_core::scenario::load_suite;
use opsdesk_core::tickets::{CauseModel, Decision};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// 50 two-cause cases whose top posterior straddles 0.8, plus ties.
fn threshold_table() -> Vec<(CauseModel, Vec<String>)> {
    let causes = vec!["config".to_string(), "data".to_string()];
    let mut out = Vec::new();
    for i in 0..50 {
        // one feature f; P(c1|f) = a / (a + b) with equal priors
        let p: f64 = match i {
            0..=19 => 0.60 + 0.01 * i as f64,
            20..=29 => 0.795 + 0.001 * (i - 20) as f64,
            30..=39 => 0.8005 + 0.002 * (i - 30) as f64,
            40..=47 => 0.85 + 0.015 * (i - 40) as f64,
            _ => 0.5,
        };
        let m = CauseModel::from_parts(causes.clone(), vec!["f".into()], vec![0.5, 0.5], vec![vec![p], vec![1.0 - p]], 1.0).unwrap();
        out.push((m, vec!["f".to_string()]));
    }
    out
}

#[test]
fn auto_assignment_only_at_or_above_threshold() {
    let table = threshold_table();
    assert_eq!(table.len(), 50);
    let (mut auto, mut manual) = (0, 0);
    for (m, f) in &table {
        let r = m.assign_features(f, 0.8);
        let best = r.posterior.values().copied().fold(0.0, f64::max);
        match r.decided {
            Decision::Auto { .. } => {
                auto += 1;
                assert!(best >= 0.8, "auto at {best}");
            }
            Decision::ManualReview => {
                manual += 1;
                assert!(best < 0.8 || r.posterior.values().filter(|p| (**p - best).abs() < 1e-12).count() > 1, "manual at {best}");
            }
        }
    }
    assert!(auto > 0 && manual > 0);
}

#[test]
fn exact_boundary_is_automatic() {
    let m = CauseModel::from_parts(vec!["a".into(), "b".into()], vec![], vec![0.8, 0.2], vec![vec![], vec![]], 1.0).unwrap();
    assert!(matches!(m.assign_features(&[], 0.8).decided, Decision::Auto { .. }), "{:?}", m.posterior(&[]));
}

#[test]
fn chat_call_budget_is_never_exceeded() {
    let config = Config::default();
    let world = fixtures().join("world");
    let suite = load_suite(&fixtures().join("deepsearch/scenarios.json")).unwrap();
    for s in &suite {
        for calls in 1..=6u32 {
            let mut s = s.clone();
            s.options.max_chat_calls = Some(calls);
            let out = s.run(&world, &config).unwrap();
            assert!(out.trace.usage.chat_calls <= calls, "{} used {} of {calls}", s.id, out.trace.usage.chat_calls);
            if out.trace.stop_reason == StopReason::BudgetExhausted {
                assert!(out.answer.has_flag(flags::PARTIAL), "{} at {calls}", s.id);
            }
        }
    }
}

#[test]
fn over_budget_run_returns_a_flagged_partial_answer() {
    let config = Config::default();
    let suite = load_suite(&fixtures().join("deepsearch/scenarios.json")).unwrap();
    let s = suite.iter().find(|s| s.id == "budget-exhausted").unwrap();
    let out = s.run(&fixtures().join("world"), &config).unwrap();
    assert_eq!(out.trace.stop_reason, StopReason::BudgetExhausted);
    assert!(out.answer.has_flag(flags::PARTIAL));
    assert!(!out.answer.text.is_empty());
    assert!(out.trace.usage.chat_calls <= 3);
}

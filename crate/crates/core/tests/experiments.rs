//! Experiment harness outputs against closed-form expectations.

use gridhelm_core::experiments::{migration_experiment, runtime_experiment, runtime_sweep};
use gridhelm_core::trace::TraceConfig;

/// Completion on a site of constant load `load` for `work` seconds of
/// accrual starting at `start`.
fn finish(start: f64, work: f64, load: f64) -> f64 {
    start + work * (1.0 + load)
}

#[test]
fn migration_numbers_match_the_accrual_law() {
    let rep = migration_experiment(None, true).unwrap();
    let staging = (10e6 + 5e6) / 100e6;
    assert_eq!(rep.reference_completion, Some(finish(0.0, 283.0, 0.0)));
    assert_eq!(rep.stay_put_completion, Some(finish(0.0, 283.0, 1.0)));
    assert_eq!(rep.decision_time, Some(282.0));
    assert_eq!(rep.accrued_at_decision, Some(282.0 / 2.0));
    assert_eq!(rep.projected_stay_put, rep.stay_put_completion);
    let migrated = rep.migrated_completion.unwrap();
    assert!((migrated - finish(282.0 + staging, 283.0, 0.0)).abs() < 1e-9, "{migrated}");
    let ck = rep.checkpointed_completion.unwrap();
    assert!((ck - finish(282.0 + staging, 283.0 - 141.0, 0.0)).abs() < 1e-9, "{ck}");
    assert_eq!(rep.dual_run_original_completion, rep.stay_put_completion);
    assert!(rep.self_check().is_empty());

    let row = |t: f64| rep.rows.iter().find(|r| r.t == t).unwrap();
    assert_eq!(row(282.0).stay_put, 100.0 * 141.0 / 283.0);
    assert_eq!(row(283.0).reference, 100.0);
    assert_eq!(row(282.0).migrated, 0.0);
    assert_eq!(row(282.0).migrated_checkpointed, 100.0 * 141.0 / 283.0);
    assert!((row(283.0).migrated - 100.0 * (283.0 - 282.0 - staging) / 283.0).abs() < 1e-9);
}

#[test]
fn production_move_matches_dual_run() {
    let dual = migration_experiment(None, true).unwrap();
    let single = migration_experiment(None, false).unwrap();
    assert_eq!(dual.migrated_completion, single.migrated_completion);
    assert_eq!(dual.checkpointed_completion, single.checkpointed_completion);
    assert_eq!(single.dual_run_original_completion, None);
    assert_eq!(dual.to_csv(), single.to_csv());
}

#[test]
fn migration_is_deterministic() {
    assert_eq!(migration_experiment(None, true).unwrap(), migration_experiment(None, true).unwrap());
}

#[test]
fn runtime_protocol_bounds() {
    let r = runtime_experiment(TraceConfig::new(7, 0.0)).unwrap();
    for c in &r.cases {
        let rel = (c.evaluation.estimated_runtime - c.evaluation.actual_runtime).abs() / c.evaluation.actual_runtime;
        assert!(rel < 1e-9, "case {} off by {rel}", c.case);
    }
    let sweep = runtime_sweep(0..20, 0.1).unwrap();
    assert_eq!(sweep.len(), 20);
    assert!(sweep.iter().all(|(_, m)| *m <= 15.0), "{sweep:?}");
}

use steingrad::oracle::{run_suite, CheckStatus, EnumerationBudget, Suite};

#[test]
fn every_suite_passes_at_default_budgets() {
    for suite in Suite::ALL {
        let report = run_suite(suite, &EnumerationBudget::default());
        assert!(report.passed(), "{report}");
        assert!(report.rows.iter().all(|r| r.status == CheckStatus::Pass), "{report}");
    }
}

#[test]
fn small_budgets_skip_instead_of_failing() {
    let tight = EnumerationBudget { max_states: 16, max_tuples: 64 };
    let ops = run_suite(Suite::Operators, &tight);
    assert!(ops.passed(), "{ops}");
    assert!(ops.rows.iter().any(|r| matches!(r.status, CheckStatus::Skipped(_))));
    let unbiased = run_suite(Suite::Unbiasedness, &tight);
    assert!(unbiased.passed(), "{unbiased}");
    assert!(unbiased.rows.iter().any(|r| matches!(r.status, CheckStatus::Skipped(_))));
}

#[test]
fn report_lists_every_operator() {
    let text = run_suite(Suite::Operators, &EnumerationBudget::default()).to_string();
    for name in ["gibbs", "mpf", "birthdeath", "difference"] {
        assert!(text.contains(name), "{text}");
    }
}

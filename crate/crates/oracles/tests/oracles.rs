use skillflow_oracles::expr::run_expression_oracle;
use skillflow_oracles::gateway::{run_gateway_oracle, EndStatus};
use skillflow_oracles::state_machine::{check_table, states_recovering_to_idle, STATES};

#[test]
fn evaluator_matches_reference() {
    let report = run_expression_oracle(7, 2000, 6);
    assert!(report.mismatches.is_empty(), "{:#?}", &report.mismatches[..report.mismatches.len().min(5)]);
    assert!(report.distinct >= 1000, "{report:?}");
    assert!(report.valued >= 300, "too few error-free cases: {report:?}");
    assert_eq!(report.max_depth, 6);
}

#[test]
fn gateway_graphs_match_reference() {
    let report = run_gateway_oracle(11, 400, 10);
    assert!(report.mismatches.is_empty(), "{:#?}", &report.mismatches[..report.mismatches.len().min(3)]);
    for status in [EndStatus::Completed, EndStatus::Faulted, EndStatus::Stuck] {
        assert!(
            report.by_status.get(&format!("{status:?}")).copied().unwrap_or(0) > 0,
            "no {status:?} case in {report:?}"
        );
    }
    println!("{report:?}");
}

#[test]
fn transition_table_and_recovery() {
    let report = check_table();
    assert!(report.mismatches.is_empty(), "{:?}", report.mismatches);
    assert_eq!((report.command_pairs, report.advance_rows), (55, 7));
    assert_eq!(states_recovering_to_idle().len(), STATES.len());
}

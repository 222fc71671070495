use dcscr::checks::{run_suite, Suite};
use dcscr::Exec;

fn run(suite: Suite) {
    let outcomes = run_suite(suite, Exec::default());
    for o in &outcomes {
        println!("{o}");
    }
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn oracle_suite() {
    run(Suite::Oracle);
}

#[test]
fn gradients_suite() {
    run(Suite::Gradients);
}

#[test]
fn invariants_suite() {
    run(Suite::Invariants);
}

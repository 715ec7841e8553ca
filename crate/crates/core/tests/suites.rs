use hysparse::verify::{run_suite, Suite};

fn run(suite: Suite) {
    let report = run_suite(suite, 7).unwrap();
    println!("{report}");
    assert!(report.passed(), "{report}");
}

#[test]
fn kernels_suite() {
    run(Suite::Kernels);
}

#[test]
fn selection_suite() {
    run(Suite::Selection);
}

#[test]
fn cache_suite() {
    run(Suite::Cache);
}

#[test]
fn parity_suite() {
    run(Suite::Parity);
}

#[test]
fn grads_suite() {
    run(Suite::Grads);
}

use std::time::Instant;

use latent_dialog::autodiff::{inject_gradient_fault, OpKind};
use latent_dialog::verify::{run_and_report, run_battery};

#[test]
fn battery_passes_quickly() {
    let start = Instant::now();
    let (ok, table) = run_and_report();
    assert!(ok, "{table}");
    assert!(start.elapsed().as_secs() < 60, "{table}");
    assert!(
        table.lines().filter(|l| l.starts_with("PASS")).count() >= 35,
        "{table}"
    );
}

#[test]
fn injected_fault_names_the_op() {
    let _guard = inject_gradient_fault(OpKind::Sigmoid);
    let results = run_battery();
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    assert!(failed.contains(&"grad sigmoid"), "{failed:?}");
    assert!(!failed.contains(&"grad tanh"), "{failed:?}");
}

use asanet_core::gradcheck::{run, Options, Scope, TOLERANCE};

fn check(scope: Scope, seeds: usize) {
    let report = run(scope, &Options { seeds, inject_fault: false }).unwrap();
    for item in &report.items {
        println!("{:?} {:<40} {:.3e}", item.scope, item.name, item.max_rel_err);
    }
    for item in &report.items {
        assert!(item.passed(), "{} has relative error {:.3e} > {:e}", item.name, item.max_rel_err, TOLERANCE);
    }
}

#[test]
fn every_op_over_twenty_seeds() {
    check(Scope::Ops, 20);
}

#[test]
fn blocks() {
    check(Scope::Blocks, 5);
}

#[test]
fn asre() {
    check(Scope::Asre, 5);
}

#[test]
fn losses() {
    check(Scope::Losses, 10);
}

#[test]
fn full_network() {
    check(Scope::Full, 1);
}

#[test]
fn faulty_backward_rule_is_caught() {
    let report = run(Scope::Ops, &Options { seeds: 1, inject_fault: true }).unwrap();
    assert!(!report.passed());
    let bad: Vec<_> = report.items.iter().filter(|i| !i.passed()).collect();
    assert_eq!(bad.len(), 1);
    assert!(bad[0].name.contains("faulty"));
}

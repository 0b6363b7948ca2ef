//! Acceptance criteria. Each criterion prints one result line; gating ones must pass.

use std::process::ExitCode;

use relmark::harness::acceptance::run_all;

fn main() -> ExitCode {
    let results = run_all();
    for c in &results {
        println!("{}", c.line());
    }
    let failed: Vec<_> = results.iter().filter(|c| c.gating && !c.passed).map(|c| c.id).collect();
    let passed = results.iter().filter(|c| c.passed).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("gating criteria failed: {failed:?}");
        ExitCode::FAILURE
    }
}

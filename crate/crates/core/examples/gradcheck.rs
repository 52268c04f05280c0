//! Runs the oracle checks: magic-box identities, the zero-sum closed form,
//! and exact meta-gradients against finite differences.

use metamarl::harness::gradcheck::run_suite;

fn main() {
    let game = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    let results = run_suite(&game).unwrap_or_else(|e| {
        eprintln!("{e}");
        std::process::exit(1)
    });
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    if results.iter().any(|r| !r.passed) {
        std::process::exit(3);
    }
}

//! Run every registered oracle pair and print its worst disagreement.
//!
//! cargo run --release --example verify_oracles

use cadcrafter::oracles::{OracleConfig, OracleSuite};

fn main() {
    let report = OracleSuite::default().verify(&OracleConfig::default());
    for c in &report.checks {
        println!("{} {:<18} {} cases, max err {:.3e}, tolerance {:.0e}", if c.pass { "ok  " } else { "FAIL" }, c.name, c.cases, c.max_err, c.tolerance);
    }
    if !report.all_pass() {
        std::process::exit(1);
    }
}

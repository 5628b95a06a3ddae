//! Runs the finite-difference gradient checks and prints the report.

use voxatlas::gradcheck::{run, Scope};

fn main() {
    let scope = std::env::args().nth(1).map(|s| s.parse::<Scope>()).transpose().unwrap_or_else(|e| {
        eprintln!("{e}");
        std::process::exit(2)
    });
    let report = run(scope.unwrap_or(Scope::All), 0);
    print!("{report}");
    std::process::exit(if report.passed() { 0 } else { 1 });
}

//! Central-difference gradient checks of every differentiable op and the
//! full encode→align→score path, plus the softmax normalization sweep.
//!
//!     cargo run --release --example gradcheck_suite -- [seeds]

use damage_cot::diagnostics::{gradient_suite, softmax_row_deviation};

fn main() -> damage_cot::Result<()> {
    let n: u64 = std::env::args().nth(1).map_or(5, |s| s.parse().expect("seed count"));
    let seeds: Vec<u64> = (0..n).collect();
    let entries = gradient_suite(&seeds)?;
    for e in &entries {
        println!(
            "{:<20} seed {}  {:>4} elements  max rel err {:.2e}  {}",
            e.op,
            e.seed,
            e.report.checked,
            e.report.max_rel_error,
            if e.passed() { "ok" } else { "FAIL" }
        );
    }
    println!("softmax rows: max |Σ - 1| = {:.2e}", softmax_row_deviation(1000, 0));
    let failed = entries.iter().filter(|e| !e.passed()).count();
    if failed > 0 {
        eprintln!("{failed} checks failed");
        std::process::exit(1);
    }
    Ok(())
}

//! Central finite-difference check of every differentiable op.
//!
//! `cargo run --release --example gradient_check -- [cases]`

fn main() -> gradcore::Result<()> {
    let cases: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(20);
    let start = std::time::Instant::now();
    let checks = gradcore::gradcheck::op_suite(cases, 0)?;
    for c in &checks {
        let verdict = if c.worst < 1e-4 { "ok" } else { "FAIL" };
        println!(
            "{:<24} {:>3} shapes  worst rel. error {:.2e}  {verdict}",
            c.op, c.cases, c.worst
        );
    }
    println!("{} ops in {:.1?}", checks.len(), start.elapsed());
    Ok(())
}

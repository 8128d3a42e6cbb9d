//! Runs the full gradient suite, then again with a corrupted conv3x3
//! backward pass to show the harness catching it.

use rafcn::gradsuite::{format_report, run_suite};
use rafcn::{OpKind, Result};

fn main() -> Result<()> {
    let clean = run_suite(None)?;
    print!("{}", format_report(&clean));
    println!();

    let faulty = run_suite(Some(OpKind::Conv3x3))?;
    let flagged: Vec<&str> = faulty.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    println!("with a corrupted conv3x3 backward, failing checks: {flagged:?}");
    Ok(())
}

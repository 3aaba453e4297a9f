use repsnet_core::gradcheck;

use crate::error::{CliError, Result};

pub fn run(seed: u64) -> Result<()> {
    let results = gradcheck::run_all(seed);
    println!("{:<34} {:>12} {:>10}  result", "check", "rel err", "tolerance");
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{:<34} {:>12.3e} {:>10.1e}  {}",
            r.name,
            r.rel_err,
            r.tolerance,
            if r.pass { "PASS" } else { "FAIL" }
        );
        if !r.pass {
            failed.push(r.name.clone());
        }
    }
    println!("{} checks, {} failed", results.len(), failed.len());
    if !failed.is_empty() {
        return Err(CliError::Validation(format!(
            "gradient checks failed: {}",
            failed.join(", ")
        )));
    }
    Ok(())
}

//! Full verification run at desk scale; writes the JSON report and prints a
//! one-line verdict per check.

use lowrank::experiment::{run_verify, ExperimentConfig, ExperimentKind};

fn main() -> lowrank::Result<()> {
    let report = run_verify(&ExperimentConfig::desk(ExperimentKind::Verify))?;
    for c in &report.checks {
        println!("{:<50} {:?}", c.id, c.verdict);
    }
    let path = std::env::temp_dir().join("lowrank-report.json");
    std::fs::write(&path, report.to_json()?).map_err(|e| lowrank::Error::io(&path, e))?;
    println!("report written to {}", path.display());
    Ok(())
}

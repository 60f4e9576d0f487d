//! Runs the finite-difference gradient suite, then shows that a corrupted
//! block is caught and named.

use ddn::gradcheck::{run_gradcheck, GradCheckConfig};

fn main() -> ddn::Result<()> {
    let report = run_gradcheck(&GradCheckConfig {
        instances: 10,
        ..Default::default()
    })?;
    print!("{}", report.to_text());

    let broken = run_gradcheck(&GradCheckConfig {
        instances: 2,
        corrupt: Some("tps_U".into()),
        ..Default::default()
    })?;
    if let Some(b) = broken.failure() {
        println!("corrupted run flagged block {}", b.block);
    }
    Ok(())
}
